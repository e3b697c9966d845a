use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use pqe_core::cluster::{read_centroids, write_centroids};
use pqe_core::embedstub::{read_embeddings, write_embeddings};
use pqe_core::evalkit::{evaluate, parse_metrics, read_qrels, read_run, write_qrels, write_run};
use pqe_core::graddiag::{diagnose_strategies, write_diagnostics_csv};
use pqe_core::index::{load_index, save_index};
use pqe_core::synthbench::{embed_documents, embed_queries, generate, run_benchmark};
use pqe_core::{
    build_index, cluster_corpus, BenchOptions, ClusterConfig, QueryEmbedding, Representation, RetrievalConfig,
    TokenEmbeddingMatrix,
};

use crate::error::{at, CliError};
use crate::files::{read_tsv, write_tsv, write_with, RunManifest};
use crate::{BenchArgs, ClusterArgs, DiagnoseArgs, EmbedArgs, EvalArgs, IndexArgs, SearchArgs};

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

pub fn embed(a: EmbedArgs) -> Result<(), CliError> {
    let enc = &a.encoder;
    let spec = a.synth.then(|| a.synth_spec.spec());
    let mut manifest;
    let documents = match (&a.input, spec) {
        (_, Some(spec)) => {
            let corpus = generate(&spec)?;
            let queries_out = a
                .queries_out
                .clone()
                .unwrap_or_else(|| with_suffix(&a.output, ".queries.tsv"));
            let qrels_out = a.qrels_out.clone().unwrap_or_else(|| with_suffix(&a.output, ".qrels"));
            write_tsv(&queries_out, &corpus.queries)?;
            write_with(&qrels_out, |out| write_qrels(&corpus.qrels, out))?;
            manifest = RunManifest::new("embed", config_json(enc, Some(spec)), Some(enc.seed))
                .output("queries", &queries_out)
                .output("qrels", &qrels_out);
            corpus.documents
        }
        (Some(input), None) => {
            manifest = RunManifest::new("embed", config_json(enc, None), Some(enc.seed)).input("documents", input);
            read_tsv(input)?
        }
        (None, None) => return Err(CliError::validation("either --input or --synth is required")),
    };
    if documents.is_empty() {
        return Err(CliError::validation("no documents"));
    }
    let matrices = embed_documents(&documents, enc.dim, enc.seed, enc.limit)?;
    write_embeddings(&matrices, &a.output).map_err(at(&a.output))?;
    manifest = manifest.output("embeddings", &a.output);
    manifest.write()?;
    println!("embedded {} documents, dim {}", matrices.len(), enc.dim);
    Ok(())
}

fn config_json(enc: &crate::EncoderArgs, synth: Option<pqe_core::SynthSpec>) -> serde_json::Value {
    json!({ "dim": enc.dim, "seed": enc.seed, "limit": enc.limit, "synth": synth })
}

pub fn cluster(a: ClusterArgs) -> Result<(), CliError> {
    let config = ClusterConfig {
        k: a.k,
        max_iters: a.max_iters,
        tol: a.tol,
        include_cls: a.include_cls,
    };
    config.validate()?;
    let docs = read_embeddings(&a.input).map_err(at(&a.input))?;
    let sets = cluster_corpus(&docs, &config)?;
    write_centroids(&sets, &a.output).map_err(at(&a.output))?;
    RunManifest::new("cluster", config, None)
        .input("embeddings", &a.input)
        .output("centroids", &a.output)
        .write()?;
    let converged = sets.iter().filter(|s| s.converged).count();
    let rows: usize = sets.iter().map(|s| s.k_effective()).sum();
    println!(
        "clustered {} documents into {rows} centroids, {converged} converged",
        sets.len()
    );
    Ok(())
}

pub fn index(a: IndexArgs) -> Result<(), CliError> {
    let sets = read_centroids(&a.input).map_err(at(&a.input))?;
    let index = build_index(&sets)?;
    save_index(&index, &a.output).map_err(at(&a.output))?;
    RunManifest::new("index", json!({ "dim": index.dim() }), None)
        .input("centroids", &a.input)
        .output("index", &a.output)
        .write()?;
    println!("indexed {} documents, {} centroids", index.num_docs(), index.num_rows());
    Ok(())
}

#[derive(Serialize)]
struct SearchConfig {
    #[serde(flatten)]
    retrieval: RetrievalConfig,
    k: usize,
    pooling: String,
    dim: usize,
    seed: u64,
    limit: usize,
    tag: String,
}

pub fn search(a: SearchArgs) -> Result<(), CliError> {
    let index = load_index(&a.index).map_err(at(&a.index))?;
    let mut manifest_inputs = vec![("index", a.index.clone()), ("queries", a.queries.clone())];
    if let Some(path) = &a.centroids {
        let sets = read_centroids(path).map_err(at(path))?;
        if build_index(&sets)? != index {
            return Err(CliError::validation(format!(
                "{} does not match index {}",
                path.display(),
                a.index.display()
            )));
        }
        manifest_inputs.push(("centroids", path.clone()));
    }
    let dim = a.dim.unwrap_or(index.dim());
    if dim != index.dim() {
        return Err(CliError::validation(format!(
            "--dim {dim} does not match index dim {}",
            index.dim()
        )));
    }
    let k = a.k.unwrap_or(index.max_k());
    if k == 0 {
        return Err(CliError::validation("--k must be at least 1"));
    }
    let retrieval = RetrievalConfig {
        r: a.r.unwrap_or(RetrievalConfig::for_k(k).r),
        final_k: a.final_k,
        mode: a.mode,
    };
    retrieval.validate()?;

    let queries = read_tsv(&a.queries)?;
    let embedded = embed_queries(&queries, dim, a.seed, a.limit, a.pooling)?;
    let runs = index.retrieve_all(&embedded, &retrieval)?;
    write_run(&runs, &a.output, &a.tag).map_err(at(&a.output))?;

    let config = SearchConfig {
        retrieval,
        k,
        pooling: a.pooling.to_string(),
        dim,
        seed: a.seed,
        limit: a.limit,
        tag: a.tag,
    };
    let mut manifest = RunManifest::new("search", config, Some(a.seed)).output("run", &a.output);
    for (role, path) in &manifest_inputs {
        manifest = manifest.input(role, path);
    }
    manifest.write()?;
    println!(
        "searched {} queries ({}, R={})",
        runs.len(),
        retrieval.mode,
        retrieval.r
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let metrics = parse_metrics(&a.metrics)?;
    let runs = read_run(&a.run).map_err(at(&a.run))?;
    let qrels = read_qrels(&a.qrels).map_err(at(&a.qrels))?;
    let report = evaluate(&runs, &qrels, &metrics)?;
    for m in &metrics {
        let value = report.mean(*m).map_or("nan".to_string(), |v| format!("{v:.6}"));
        println!("{m}\t{value}");
    }
    if !report.warnings.is_empty() {
        eprintln!("warning: {} queries had no relevant judgments", report.warnings.len());
    }
    if let Some(out) = &a.output {
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::io(out.display(), e))?;
        std::fs::write(out, format!("{json}\n")).map_err(|e| CliError::io(out.display(), e))?;
        let names: Vec<String> = metrics.iter().map(|m| m.to_string()).collect();
        RunManifest::new("eval", json!({ "metrics": names }), None)
            .input("run", &a.run)
            .input("qrels", &a.qrels)
            .output("report", out)
            .write()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseConfig {
    strategies: Vec<&'static str>,
    k: usize,
    batch_size: usize,
    pooling: String,
    seed: u64,
    limit: usize,
    sample_seed: u64,
}

pub fn diagnose(a: DiagnoseArgs) -> Result<(), CliError> {
    if a.strategies.is_empty() {
        return Err(CliError::validation("--strategies is empty"));
    }
    let docs = read_embeddings(&a.input).map_err(at(&a.input))?;
    let dim = docs.first().ok_or_else(|| CliError::validation("no documents"))?.dim();
    let by_id: HashMap<&str, &TokenEmbeddingMatrix<f32>> = docs.iter().map(|d| (d.doc_id(), d)).collect();
    let qrels = read_qrels(&a.qrels).map_err(at(&a.qrels))?;
    let queries = read_tsv(&a.queries)?;
    let embedded = embed_queries(&queries, dim, a.seed, a.limit, a.pooling)?;

    // Positive: the smallest judged-relevant doc id present in the corpus.
    let mut pairs: Vec<(QueryEmbedding<f32>, &TokenEmbeddingMatrix<f32>)> = Vec::new();
    for q in embedded {
        let positive = qrels.query(&q.qid).and_then(|judged| {
            let mut ids: Vec<&String> = judged.iter().filter(|(_, &r)| r >= 1).map(|(d, _)| d).collect();
            ids.sort();
            ids.into_iter().find_map(|d| by_id.get(d.as_str()).copied())
        });
        if let Some(doc) = positive {
            pairs.push((q, doc));
        }
    }
    let skipped = queries.len() - pairs.len();
    if skipped > 0 {
        eprintln!("warning: {skipped} queries have no relevant document in the corpus and were skipped");
    }

    let config = ClusterConfig::with_k(a.k);
    config.validate()?;
    let samples = diagnose_strategies(&pairs, &a.strategies, &config, a.batch_size, a.sample_seed)?;
    write_with(&a.output, |out| write_diagnostics_csv(out, &samples))?;

    let manifest_config = DiagnoseConfig {
        strategies: a.strategies.iter().map(Representation::as_str).collect(),
        k: a.k,
        batch_size: a.batch_size,
        pooling: a.pooling.to_string(),
        seed: a.seed,
        limit: a.limit,
        sample_seed: a.sample_seed,
    };
    RunManifest::new("diagnose", manifest_config, Some(a.seed))
        .input("embeddings", &a.input)
        .input("queries", &a.queries)
        .input("qrels", &a.qrels)
        .output("diagnostics", &a.output)
        .write()?;

    println!("strategy\tmean_loss\tmean_max_r\tmean_var_r");
    for s in &a.strategies {
        let picked: Vec<_> = samples.iter().filter(|(r, _)| r == s).map(|(_, d)| d).collect();
        let n = picked.len().max(1) as f64;
        let mean = |f: fn(&pqe_core::DiagnosticsSample) -> f64| picked.iter().map(|d| f(d)).sum::<f64>() / n;
        println!(
            "{s}\t{:.6}\t{:.6}\t{:.6e}",
            mean(|d| d.loss),
            mean(|d| d.max_r),
            mean(|d| d.var_r)
        );
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<(), CliError> {
    let spec = a.synth_spec.spec();
    let options = BenchOptions {
        dim: a.dim,
        embed_seed: a.seed,
        repetitions: a.repetitions,
        final_k: a.final_k,
        ..BenchOptions::default()
    };
    let report = run_benchmark(&spec, &a.configs, &options)?;
    write_with(&a.output, |out| report.write_csv(out))?;
    RunManifest::new(
        "bench",
        json!({ "spec": spec, "options": options, "configs": a.configs }),
        Some(spec.seed),
    )
    .output("report", &a.output)
    .write()?;
    report
        .write_csv(std::io::stdout().lock())
        .map_err(|e| CliError::io("stdout", e))
}
