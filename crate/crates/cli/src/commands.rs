use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use koofu_core::classify::{
    aggregate_text_prototypes, group_by_label, load_bank, save_bank, PrototypeBank, PrototypeMode,
};
use koofu_core::dataio::{self, ArtifactKind};
use koofu_core::eval::{
    self, ClassSet, Classifier, EvalReport, Experiment, ProtocolConfig, SweepAxis, SweepBase,
};
use koofu_core::synth::{self, SynthConfig};
use koofu_core::transform::{fit_koofu_with, ClassWeighting, FitOptions};
use koofu_core::{
    build_prototypes, knn_classify, linalg, nvp_classify, EmbeddingDataset, Embeddings,
    KooFuTransform, Metric, MultiLabelGroundTruth, NeighborIndex, OutDim, ScatterStats,
};

use crate::error::CliError;
use crate::{
    ApplyArgs, AxisArg, ClassifierArg, ClassifyArgs, DataArgs, EvalArgs, FitArgs, ModeArg, Pair,
    PrototypesArgs, SweepArgs, SynthArgs, VerifyArgs, WeightingArg,
};

type Result<T> = std::result::Result<T, CliError>;

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn load_pair(pair: &Pair, classes: Option<&Path>) -> Result<EmbeddingDataset> {
    dataio::read_dataset(&pair.embeddings, &pair.labels, classes).map_err(|e| {
        CliError::from(e).context(format!("{},{}", show(&pair.embeddings), show(&pair.labels)))
    })
}

fn load_transform(path: &Path) -> Result<(KooFuTransform, String)> {
    let t = dataio::read_transform(path).map_err(|e| CliError::from(e).context(show(path)))?;
    let id = dataio::transform_id(&t)?;
    Ok((t, id))
}

fn load_class_set(path: &Path) -> Result<ClassSet> {
    let ids = dataio::read_class_set(path).map_err(|e| CliError::from(e).context(show(path)))?;
    let tag = path
        .file_stem()
        .map_or_else(|| show(path), |s| s.to_string_lossy().into_owned());
    Ok(ClassSet { tag, ids })
}

fn weighting(w: WeightingArg) -> ClassWeighting {
    match w {
        WeightingArg::Count => ClassWeighting::Count,
        WeightingArg::Uniform => ClassWeighting::Uniform,
    }
}

fn out_dim(l: Option<usize>) -> OutDim {
    l.map_or(OutDim::Full, OutDim::Dims)
}

fn mode(m: ModeArg) -> PrototypeMode {
    match m {
        ModeArg::MeanThenNormalize => PrototypeMode::MeanThenNormalize,
        ModeArg::NormalizeThenMean => PrototypeMode::NormalizeThenMean,
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "--lambda must be positive and finite, got {lambda}"
        )))
    }
}

pub fn fit(a: FitArgs) -> Result<()> {
    if a.shards.is_empty() && a.stats.is_empty() {
        return Err(CliError::validation(
            "give at least one --shard or --stats input",
        ));
    }
    check_lambda(a.lambda)?;
    if a.out_dim == Some(0) {
        return Err(CliError::validation("--out-dim must be positive"));
    }

    let saved: Vec<ScatterStats> = a
        .stats
        .iter()
        .map(|p| dataio::read_stats(p).map_err(|e| CliError::from(e).context(show(p))))
        .collect::<Result<_>>()?;

    // The class count must be known before the first shard is accumulated.
    let mut k = match &a.classes {
        Some(p) => dataio::read_class_table(p)
            .map_err(|e| CliError::from(e).context(show(p)))?
            .len(),
        None => 0,
    };
    if a.classes.is_none() {
        for s in &a.shards {
            let labels = dataio::read_labels(&s.labels)
                .map_err(|e| CliError::from(e).context(show(&s.labels)))?;
            k = k.max(labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
        }
        k = saved
            .iter()
            .map(ScatterStats::num_classes)
            .fold(k, usize::max);
    }

    let mut stats: Option<ScatterStats> = None;
    for s in &a.shards {
        let ds = load_pair(s, None)?;
        if let Some(&bad) = ds.labels.iter().find(|&&l| l as usize >= k) {
            return Err(CliError::validation(format!(
                "{}: label {bad} outside the {k} classes of the class table",
                show(&s.labels)
            )));
        }
        let acc = stats.get_or_insert_with(|| ScatterStats::new(ds.dim(), k));
        acc.accumulate_rows(&ds.embeddings, &ds.labels)
            .map_err(|e| CliError::from(e).context(show(&s.embeddings)))?;
        log::info!("accumulated {} rows from {}", ds.len(), show(&s.embeddings));
    }
    for (s, p) in saved.into_iter().zip(&a.stats) {
        stats = Some(match stats {
            None => s,
            Some(acc) => acc
                .merge(&s)
                .map_err(|e| CliError::from(e).context(show(p)))?,
        });
    }
    let stats = stats.expect("at least one input");

    if let Some(p) = &a.save_stats {
        dataio::write_stats(&stats, p).map_err(|e| CliError::from(e).context(show(p)))?;
    }
    let t = fit_koofu_with(
        &stats,
        &FitOptions {
            lambda: a.lambda,
            out_dim: out_dim(a.out_dim),
            weighting: weighting(a.weighting),
        },
    )?;
    dataio::write_transform(&t, &a.output)
        .map_err(|e| CliError::from(e).context(show(&a.output)))?;
    println!(
        "wrote {} (D={}, L={}, lambda={}, samples={}, id={})",
        show(&a.output),
        t.dim(),
        t.out_dim(),
        t.lambda(),
        stats.total(),
        dataio::transform_id(&t)?
    );
    Ok(())
}

pub fn apply(a: ApplyArgs) -> Result<()> {
    let (t, _) = load_transform(&a.transform)?;
    let x =
        dataio::read_embeddings(&a.input).map_err(|e| CliError::from(e).context(show(&a.input)))?;
    let p = t.apply(&x, a.renormalize)?;
    if p.zero_rows > 0 {
        eprintln!("warning: {} rows projected to zero", p.zero_rows);
    }
    dataio::write_embeddings(&p.embeddings, &a.output)
        .map_err(|e| CliError::from(e).context(show(&a.output)))?;
    Ok(())
}

fn report_excluded(excluded: &[u32]) {
    if !excluded.is_empty() {
        eprintln!("warning: degenerate prototypes excluded: {excluded:?}");
    }
}

fn text_bank(pair: &Pair, classes: Option<&Path>) -> Result<PrototypeBank> {
    let ds = load_pair(pair, classes)?;
    Ok(aggregate_text_prototypes(&group_by_label(&ds))?)
}

pub fn prototypes(a: PrototypesArgs) -> Result<()> {
    let transform = a.transform.as_deref().map(load_transform).transpose()?;
    let class_set = a.class_set.as_deref().map(load_class_set).transpose()?;
    let metric: Metric = a.metric.into();

    let bank = if let Some(text) = &a.text {
        if metric != Metric::Cosine {
            return Err(CliError::validation(
                "textual prototypes use the cosine metric",
            ));
        }
        let raw = text_bank(text, a.classes.as_deref())?;
        let raw = match &class_set {
            Some(set) => raw.restrict(&set.ids)?,
            None => raw,
        };
        match &transform {
            Some((t, _)) => {
                let built = raw.transformed(t)?;
                report_excluded(&built.excluded);
                built.bank
            }
            None => raw,
        }
    } else {
        let pair = a.visual.as_ref().expect("clap requires --visual or --text");
        let ds = load_pair(pair, a.classes.as_deref())?;
        let built = build_prototypes(
            &ds,
            transform.as_ref().map(|(t, _)| t),
            metric,
            mode(a.mode),
            class_set.as_ref().map(|s| s.ids.as_slice()),
        )?;
        report_excluded(&built.excluded);
        built.bank
    };
    save_bank(&bank, transform.map(|(_, id)| id), &a.output)?;
    println!(
        "wrote {} prototypes (D={}) to {}.*",
        bank.len(),
        bank.dim(),
        show(&a.output)
    );
    Ok(())
}

fn project(t: Option<&KooFuTransform>, x: Embeddings, metric: Metric) -> Result<Embeddings> {
    match t {
        None => Ok(x),
        Some(t) => {
            let p = t.apply(&x, metric == Metric::Cosine)?;
            if p.zero_rows > 0 {
                eprintln!("warning: {} rows projected to zero", p.zero_rows);
            }
            Ok(p.embeddings)
        }
    }
}

pub fn classify(a: ClassifyArgs) -> Result<()> {
    let queries = dataio::read_embeddings(&a.queries)
        .map_err(|e| CliError::from(e).context(show(&a.queries)))?;
    let transform = a.transform.as_deref().map(load_transform).transpose()?;
    let class_set = a.class_set.as_deref().map(load_class_set).transpose()?;
    let t = transform.as_ref().map(|(t, _)| t);

    let rows: Vec<Vec<u32>> = if let Some(prefix) = &a.bank {
        let (bank, sidecar) =
            load_bank(prefix).map_err(|e| CliError::from(e).context(show(prefix)))?;
        match (&sidecar.transform_id, &transform) {
            (Some(want), Some((_, got))) if want != got => {
                return Err(CliError::validation(format!(
                    "bank was built with transform {want}, --transform is {got}"
                )))
            }
            (Some(want), None) => {
                return Err(CliError::validation(format!(
                    "bank was built with transform {want}; pass it with --transform"
                )))
            }
            (None, Some(_)) => {
                return Err(CliError::validation(
                    "bank is in the raw space; drop --transform",
                ))
            }
            _ => {}
        }
        let bank = match &class_set {
            Some(set) => bank.restrict(&set.ids)?,
            None => bank,
        };
        let q = project(t, queries, bank.metric())?;
        nvp_classify(&q, &bank, a.top_k)?
    } else {
        let pair = a.index.as_ref().expect("clap requires --bank or --index");
        let ds = load_pair(pair, None)?;
        let metric: Metric = a.metric.into();
        let base = project(t, ds.embeddings, metric)?;
        let index = NeighborIndex::new(base, ds.labels, metric)?;
        let index = match &class_set {
            Some(set) => index.restrict(&set.ids)?,
            None => index,
        };
        let q = project(t, queries, metric)?;
        let res = knn_classify(&q, &index, a.k)?;
        res.rankings
            .into_iter()
            .map(|mut r| {
                r.truncate(a.top_k);
                r
            })
            .collect()
    };

    let mut text = String::new();
    for r in &rows {
        let ids: Vec<String> = r.iter().map(u32::to_string).collect();
        text.push_str(&ids.join("\t"));
        text.push('\n');
    }
    match &a.output {
        Some(p) => fs::write(p, text).map_err(|e| CliError::from(e).context(show(p)))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

struct Loaded {
    train: EmbeddingDataset,
    queries: EmbeddingDataset,
    real: Option<MultiLabelGroundTruth>,
    text: Option<PrototypeBank>,
    protocol: ProtocolConfig,
    train_id: String,
    queries_id: String,
}

impl Loaded {
    fn experiment(&self) -> Experiment<'_> {
        Experiment {
            train: &self.train,
            queries: &self.queries,
            multi_label: self.real.as_ref(),
            text_bank: self.text.as_ref(),
            train_id: &self.train_id,
            queries_id: &self.queries_id,
        }
    }
}

fn load_data(d: &DataArgs) -> Result<Loaded> {
    let classes = d.classes.as_deref();
    let train = load_pair(&d.train, classes)?;
    let queries = load_pair(&d.queries, classes)?;
    let real = d
        .real
        .as_deref()
        .map(|p| dataio::read_ground_truth(p).map_err(|e| CliError::from(e).context(show(p))))
        .transpose()?;
    let text = d.text.as_ref().map(|p| text_bank(p, classes)).transpose()?;
    let classifier = match d.classifier {
        ClassifierArg::Nvp => Classifier::Nvp,
        ClassifierArg::Knn => Classifier::Knn { k: d.k },
        ClassifierArg::TextNvp => {
            if text.is_none() {
                return Err(CliError::validation("--classifier text-nvp needs --text"));
            }
            Classifier::TextNvp
        }
    };
    let protocol = ProtocolConfig {
        classifier,
        metric: d.metric.into(),
        top_k: d.top_k,
        class_set: d.class_set.as_deref().map(load_class_set).transpose()?,
        prototype_mode: mode(d.mode),
        repeats: d.repeats as usize,
    };
    Ok(Loaded {
        train,
        queries,
        real,
        text,
        protocol,
        train_id: show(&d.train.embeddings),
        queries_id: show(&d.queries.embeddings),
    })
}

fn emit(reports: &[EvalReport], d: &DataArgs) -> Result<()> {
    let ndjson = eval::to_ndjson(reports);
    if let Some(p) = &d.output {
        fs::write(p, &ndjson).map_err(|e| CliError::from(e).context(show(p)))?;
    }
    let out = if d.json {
        ndjson
    } else {
        eval::render_table(reports)
    };
    std::io::stdout().write_all(out.as_bytes())?;
    for r in reports {
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let loaded = load_data(&a.data)?;
    let transform = match (&a.transform, a.lambda) {
        (Some(p), _) => Some(load_transform(p)?.0),
        (None, Some(lambda)) => {
            check_lambda(lambda)?;
            let stats = ScatterStats::from_dataset(&loaded.train)?;
            Some(fit_koofu_with(
                &stats,
                &FitOptions {
                    lambda,
                    out_dim: out_dim(a.out_dim),
                    weighting: weighting(a.weighting),
                },
            )?)
        }
        (None, None) => None,
    };
    let report = eval::run_protocol(&loaded.experiment(), transform.as_ref(), &loaded.protocol)?;
    emit(&[report], &a.data)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let loaded = load_data(&a.data)?;
    let axis = match a.axis {
        AxisArg::Lambda => SweepAxis::Lambda,
        AxisArg::OutDim => SweepAxis::OutDim,
        AxisArg::K => SweepAxis::K,
    };
    if axis == SweepAxis::K && !matches!(loaded.protocol.classifier, Classifier::Knn { .. }) {
        return Err(CliError::validation("a k sweep needs --classifier knn"));
    }
    if let Some(l) = a.lambda {
        check_lambda(l)?;
    }
    let stats = ScatterStats::from_dataset(&loaded.train)?;
    let base = SweepBase {
        lambda: a.lambda,
        out_dim: out_dim(a.out_dim),
        weighting: weighting(a.weighting),
        protocol: loaded.protocol.clone(),
    };
    let reports = eval::sweep(&loaded.experiment(), &stats, &base, axis, &a.values)?;
    emit(&reports, &a.data)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        dim: a.dim,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        condition: a.condition,
        separation: a.separation,
        offset: a.offset,
        seed: a.seed,
    };
    let data = synth::generate(&cfg)?;
    fs::create_dir_all(&a.output).map_err(|e| CliError::from(e).context(show(&a.output)))?;
    let path = |name: &str| -> PathBuf { a.output.join(name) };
    let write = |ds: &EmbeddingDataset, stem: &str| -> Result<()> {
        dataio::write_embeddings(&ds.embeddings, path(&format!("{stem}.kfeb")))?;
        dataio::write_labels(&ds.labels, path(&format!("{stem}.kflb")))?;
        Ok(())
    };
    write(&data.train, "train")?;
    write(&data.test, "test")?;
    dataio::write_class_table(&data.train.classes, path("classes.tsv"))?;
    let config = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(path("config.json"), config + "\n")?;
    println!(
        "wrote {} train and {} test rows (K={}, D={}) to {}",
        data.train.len(),
        data.test.len(),
        cfg.classes,
        cfg.dim,
        show(&a.output)
    );
    Ok(())
}

fn verify_stats(s: &ScatterStats) -> Vec<String> {
    let mut problems = Vec::new();
    let sw = s.within_scatter();
    let e = linalg::eigh_desc(&sw);
    if e.min() < -1e-9 * e.max().abs().max(1.0) {
        problems.push(format!(
            "within-class scatter has negative eigenvalue {:.3e}",
            e.min()
        ));
    }
    if s.total() == 0 {
        problems.push("no samples".into());
    }
    problems
}

fn verify_one(path: &Path) -> Result<(String, Vec<String>)> {
    if path.is_file() {
        if let Some(kind) = dataio::sniff(path)? {
            return Ok(match kind {
                ArtifactKind::Embeddings => {
                    let e = dataio::read_embeddings(path)?;
                    (
                        format!("embeddings N={} D={}", e.len(), e.dim()),
                        Vec::new(),
                    )
                }
                ArtifactKind::Labels => {
                    let l = dataio::read_labels(path)?;
                    (format!("labels N={}", l.len()), Vec::new())
                }
                ArtifactKind::Transform => {
                    let t = dataio::read_transform(path)?;
                    (
                        format!(
                            "transform D={} L={} id={}",
                            t.dim(),
                            t.out_dim(),
                            dataio::transform_id(&t)?
                        ),
                        t.check_invariants(),
                    )
                }
                ArtifactKind::Stats => {
                    let s = dataio::read_stats(path)?;
                    (
                        format!("stats D={} K={} N={}", s.dim(), s.num_classes(), s.total()),
                        verify_stats(&s),
                    )
                }
            });
        }
    }
    let prefix = if path.extension().is_some_and(|e| e == "json") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    if prefix.with_extension("json").is_file() {
        let (bank, side) = load_bank(&prefix)?;
        return Ok((
            format!(
                "bank {} prototypes D={} metric={} transform={}",
                bank.len(),
                bank.dim(),
                side.metric,
                side.transform_id.as_deref().unwrap_or("none")
            ),
            Vec::new(),
        ));
    }
    if !path.exists() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, "no such file").into());
    }
    Err(CliError::validation("not a recognized artifact"))
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let mut failures = 0;
    let mut io_failure = false;
    for p in &a.paths {
        match verify_one(p) {
            Ok((what, problems)) if problems.is_empty() => println!("ok\t{}\t{what}", show(p)),
            Ok((what, problems)) => {
                failures += 1;
                println!("FAIL\t{}\t{what}: {}", show(p), problems.join("; "));
            }
            Err(e) => {
                failures += 1;
                io_failure |= e.code() == 4;
                println!("FAIL\t{}\t{e}", show(p));
            }
        }
    }
    match failures {
        0 => Ok(()),
        n if io_failure => Err(CliError {
            kind: crate::error::Kind::Io,
            message: format!("{n} artifact(s) failed verification"),
        }),
        n => Err(CliError::validation(format!(
            "{n} artifact(s) failed verification"
        ))),
    }
}
