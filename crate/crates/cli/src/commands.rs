use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, IsTerminal, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use userllm_core::bench::{chat_digests, generate_answers};
use userllm_core::config::{Config, ConfigError};
use userllm_core::gateway::ImageData;
use userllm_core::orchestrator::{IdentityEvent, Pipeline, TurnError, TurnInput};
use userllm_core::parallel::ExecMode;
use userllm_core::persistence::Store;
use userllm_core::profile_init::parse_profile_text;
use userllm_core::rouge::{
    format_table, load_answers, load_dataset, run_benchmark, write_item_scores, AnswerRecord, BenchError,
};
use userllm_service::{router, serve as serve_http, shutdown_signal, ServiceOptions};

use crate::{BenchRunArgs, BenchScoreArgs, ChatArgs, Classify, CliResult, ExitClass, Failure};

fn load_config(path: &Path) -> CliResult<Config> {
    Config::load(path).map_err(|e| {
        let class = if matches!(e, ConfigError::Io { .. }) { ExitClass::Io } else { ExitClass::Config };
        Failure::new(class, e)
    })
}

fn turn_failure(e: TurnError) -> Failure {
    let class = match &e {
        TurnError::Backend(g) if g.is_backend_failure() => ExitClass::Backend,
        TurnError::Backend(_) => ExitClass::Io,
        TurnError::Trace(_) | TurnError::Encoder(_) => ExitClass::Backend,
        TurnError::Store(_) => ExitClass::Io,
        TurnError::InvalidGeneration => ExitClass::Config,
        TurnError::UnknownSession(_) | TurnError::EmptyText => ExitClass::Other,
    };
    Failure::new(class, e)
}

fn bench_failure(e: BenchError) -> Failure {
    Failure::new(ExitClass::Io, e)
}

fn open_pipeline(config: &Config) -> CliResult<Pipeline> {
    let backends = config.build_backends().class(ExitClass::Config)?;
    let settings = config.pipeline_settings().class(ExitClass::Config)?;
    let store = Store::open(&config.store.dir, config.store_options()).class(ExitClass::Io)?;
    Ok(Pipeline::new(Arc::new(store), backends, settings))
}

pub fn serve(config_path: &Path, listen: Option<String>) -> CliResult {
    let config = load_config(config_path)?;
    let pipeline = open_pipeline(&config)?;
    let auth_token = match &config.server.auth_token_env {
        Some(var) => Some(
            std::env::var(var).map_err(|_| anyhow!("auth token variable {var} is not set")).class(ExitClass::Config)?,
        ),
        None => None,
    };
    let options = ServiceOptions { cors_origin: config.server.cors_origin.clone(), auth_token };
    let addr = listen.unwrap_or_else(|| config.server.listen.clone());
    let runtime = tokio::runtime::Runtime::new().class(ExitClass::Other)?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))
            .class(ExitClass::Io)?;
        tracing::info!(addr = %listener.local_addr().map(|a| a.to_string()).unwrap_or(addr), "listening");
        serve_http(listener, router(Arc::new(pipeline), options), shutdown_signal()).await.class(ExitClass::Io)
    })
}

fn fresh_session_id() -> String {
    let millis =
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or_default();
    format!("cli-{millis}")
}

pub fn chat(args: &ChatArgs) -> CliResult {
    let config = load_config(&args.config)?;
    let pipeline = open_pipeline(&config)?;
    let session_id = args.session.clone().unwrap_or_else(fresh_session_id);
    if !pipeline.store().session_exists(&session_id) {
        pipeline.create_session(&session_id).map_err(turn_failure)?;
    }
    let mut image = match &args.image {
        Some(path) => Some(ImageData::load(path, pipeline.settings().max_image_bytes).class(ExitClass::Io)?),
        None => None,
    };
    let mut consent = args.consent.then_some(true);

    let stdin = io::stdin();
    let interactive = stdin.is_terminal();
    let mut out = io::stdout().lock();
    if interactive {
        eprintln!("session {session_id}; /quit to exit");
    }
    loop {
        if interactive {
            eprint!("> ");
        }
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).class(ExitClass::Io)? == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == "/quit" {
            break;
        }
        let input = TurnInput { text: text.to_string(), image: image.take(), consent: consent.take() };
        let outcome = pipeline.run_turn(&session_id, input).map_err(turn_failure)?;
        if args.show_trace {
            match &outcome.identity {
                Some(IdentityEvent::Enrolled { user_id, profile_text }) => {
                    writeln!(out, "[identity] enrolled {user_id}: {profile_text}").class(ExitClass::Io)?
                }
                Some(IdentityEvent::Matched { user_id, score }) => {
                    writeln!(out, "[identity] matched {user_id} ({score:.3})").class(ExitClass::Io)?
                }
                None => {}
            }
            for (i, step) in outcome.trace.steps.iter().enumerate() {
                writeln!(out, "[step {}] {step}", i + 1).class(ExitClass::Io)?;
            }
            for (field, value) in &outcome.trace.profile_deltas {
                writeln!(out, "[update] {field}={value}").class(ExitClass::Io)?;
            }
        }
        writeln!(out, "{}", outcome.reply).class(ExitClass::Io)?;
        out.flush().class(ExitClass::Io)?;
    }
    Ok(())
}

fn write_report(report: &str, path: Option<&Path>) -> CliResult {
    print!("{report}");
    if let Some(path) = path {
        fs::write(path, report).with_context(|| format!("writing {}", path.display())).class(ExitClass::Io)?;
    }
    Ok(())
}

fn dataset_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

pub fn bench_run(args: &BenchRunArgs) -> CliResult {
    let config = load_config(&args.config)?;
    let dataset = load_dataset(&args.dataset).map_err(bench_failure)?;
    let backends = config.build_backends().class(ExitClass::Config)?;
    let settings = config.pipeline_settings().class(ExitClass::Config)?;
    let answers = generate_answers(&dataset, dataset_dir(&args.dataset), &backends, &settings, args.jobs.into())
        .map_err(|f| {
            let item = f.item_id.clone();
            let mut failure = turn_failure(f.source);
            failure.error = failure.error.context(format!("item {item}"));
            failure
        })?;

    if let Some(path) = &args.answers_out {
        let mut text = String::new();
        for (item_id, candidate) in &answers {
            let record = AnswerRecord { item_id: item_id.clone(), candidate: candidate.clone() };
            text.push_str(&serde_json::to_string(&record).class(ExitClass::Other)?);
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display())).class(ExitClass::Io)?;
    }

    let answers: HashMap<String, String> = answers.into_iter().collect();
    let mode = if args.jobs > 1 { ExecMode::Parallel } else { ExecMode::Sequential };
    let outcome = run_benchmark(&dataset, &answers, mode).map_err(bench_failure)?;
    write_item_scores(&args.out, &outcome.items)
        .with_context(|| format!("writing {}", args.out.display()))
        .class(ExitClass::Io)?;
    let aggregate =
        outcome.aggregate.ok_or_else(|| Failure::new(ExitClass::MissingAnswer, anyhow!("no item was answered")))?;
    write_report(&format_table(&[(args.label.clone(), aggregate)]), args.report.as_deref())
}

pub fn bench_score(args: &BenchScoreArgs) -> CliResult {
    let dataset = load_dataset(&args.dataset).map_err(bench_failure)?;
    let answers = load_answers(&args.answers).map_err(bench_failure)?;
    let outcome = run_benchmark(&dataset, &answers, ExecMode::Parallel).map_err(bench_failure)?;
    if let Some(path) = &args.out {
        write_item_scores(path, &outcome.items)
            .with_context(|| format!("writing {}", path.display()))
            .class(ExitClass::Io)?;
    }
    if let Some(aggregate) = outcome.aggregate {
        write_report(&format_table(&[(args.label.clone(), aggregate)]), args.report.as_deref())?;
    }
    if !outcome.missing.is_empty() {
        return Err(Failure::new(
            ExitClass::MissingAnswer,
            anyhow!("{} item(s) have no answer: {}", outcome.missing.len(), outcome.missing.join(", ")),
        ));
    }
    Ok(())
}

pub fn bench_digests(dataset_path: &Path, config_path: &Path) -> CliResult {
    let config = load_config(config_path)?;
    let dataset = load_dataset(dataset_path).map_err(bench_failure)?;
    let backends = config.build_backends().class(ExitClass::Config)?;
    let settings = config.pipeline_settings().class(ExitClass::Config)?;
    let digests = chat_digests(&dataset, dataset_dir(dataset_path), &backends, &settings).map_err(|f| {
        let item = f.item_id.clone();
        let mut failure = turn_failure(f.source);
        failure.error = failure.error.context(format!("item {item}"));
        failure
    })?;
    let mut out = io::stdout().lock();
    for (item_id, digest) in digests {
        let line = serde_json::json!({ "item_id": item_id, "digest": digest });
        writeln!(out, "{line}").class(ExitClass::Io)?;
    }
    Ok(())
}

pub fn profile_parse(text: &str) -> CliResult {
    let fields = parse_profile_text(text);
    let json = serde_json::to_string_pretty(&fields).class(ExitClass::Other)?;
    println!("{json}");
    Ok(())
}
