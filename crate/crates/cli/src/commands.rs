use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use shiftlab_core::harness::{
    self, analyze_activations, emit_report, evaluate_metric, fit_scorer, magnitude_report, proximity_correlation,
    run_matrix, score_cell, sweep, EvalSet, MatrixConfig, Metric, ReportFormat, ResultTable, RunOptions, ShiftSet,
    SplitSizes,
};
use shiftlab_core::proximity::{rank_auxiliaries, FeatureSet, KernelConfig};
use shiftlab_core::shiftpack::{read_pack_file, write_pack_file, Role, ShiftPack};
use shiftlab_core::synth::{raw_pack, to_matrix};
use shiftlab_core::toynet::{export_pack, train, Loss, Mlp, OdinSettings, TrainData, TrainSpec};
use shiftlab_core::{Error, Result, Rule, Scorer, ShiftScenario, Transform};

use crate::{
    ActivationsArgs, Command, EvalArgs, MatrixArgs, OutputFormat, ProximityArgs, ReportArgs, RuleArgs, ScenarioArgs,
    ScoreArgs, SweepArgs, SynthArgs, TableFormat, TrainArgs, ValidateArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Matrix(a) => matrix(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Proximity(a) => proximity(a),
        Command::Activations(a) => activations(a),
        Command::Report(a) => report(a),
        Command::Validate(a) => validate(a),
    }
}

fn stdout_write(bytes: &[u8]) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(bytes)?;
    out.flush()?;
    Ok(())
}

fn user(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn resolve_scenario(a: &ScenarioArgs) -> Result<(ShiftScenario, SplitSizes)> {
    let mut sc = match &a.scenario {
        Some(p) => ShiftScenario::load(p)?,
        None => ShiftScenario::desk_default(0),
    };
    if let Some(alpha) = a.alpha {
        sc = sc.with_overlap(alpha);
    }
    sc = sc.with_seed(a.seed);
    sc.validate()?;
    let n = a.samples.unwrap_or(sc.samples_per_split);
    Ok((sc, SplitSizes::uniform(n)))
}

fn synth(a: SynthArgs) -> Result<()> {
    let (sc, sizes) = resolve_scenario(&a.scenario)?;
    if a.print_scenario {
        return stdout_write(sc.to_toml_string()?.as_bytes());
    }
    let out = a.out.ok_or_else(|| user("--out is required unless --print-scenario is given"))?;
    fs::create_dir_all(&out)?;
    let c = sc.class_count();
    let id_cov = sc.gen_id(sizes.test, "covariate");
    let packs = [
        ("id_train", raw_pack(&sc.gen_id(sizes.train, "train"), Role::IdTrain, c)),
        ("id_test", raw_pack(&sc.gen_id(sizes.test, "test"), Role::IdTest, c)),
        ("ood_test", raw_pack(&sc.gen_semantic_ood(sizes.test), Role::OodTest, c)),
        ("covariate_test", raw_pack(&sc.gen_covariate(&id_cov)?, Role::CovariateTest, c)),
        ("aux_train", raw_pack(&sc.gen_aux(sizes.aux), Role::AuxTrain, c)),
    ];
    for (name, pack) in packs {
        if pack.sample_count().unwrap_or(0) == 0 {
            eprintln!("warning: {name} is empty, skipped");
            continue;
        }
        write_pack_file(&pack, out.join(format!("{name}.shpk")))?;
    }
    fs::write(out.join("scenario.toml"), sc.to_toml_string()?)?;
    eprintln!("wrote packs to {}", out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (sc, sizes) = resolve_scenario(&a.scenario)?;
    let mut spec = match &a.config {
        Some(p) => TrainSpec::load(p)?,
        None => TrainSpec::default(),
    };
    if let Some(l) = a.loss {
        let loss: Loss = l.into();
        if a.config.is_none() {
            spec = TrainSpec::new(loss);
        }
        spec.loss = loss;
    }
    if let Some(e) = a.epochs {
        spec.epochs = e;
    }
    if let Some(lr) = a.lr {
        spec.learning_rate = lr;
    }
    if let Some(l) = a.oe_lambda {
        spec.oe_lambda = l;
    }
    if a.mixup_alpha.is_some() {
        spec.mixup_alpha = a.mixup_alpha;
    }
    spec.seed = a.scenario.seed;
    spec.validate()?;

    let (x, y) = to_matrix(&sc.gen_id(sizes.train, "train"));
    let aux = to_matrix(&sc.gen_aux(sizes.aux)).0;
    let mut model = Mlp::for_spec(sc.dim, sc.class_count(), &spec)?;
    let history = train(
        &mut model,
        &TrainData {
            x: x.view(),
            labels: &y,
            aux: (spec.loss == Loss::Oe).then(|| aux.view()),
        },
        &spec,
    )?;
    if let Some(last) = history.epochs.last() {
        eprintln!("trained {} epochs: loss {:.4}, train accuracy {:.4}", history.epochs.len(), last.loss, last.id_accuracy);
    }

    let odin = a.odin_epsilon.map(|epsilon| OdinSettings {
        epsilon,
        temperature: a.odin_temperature,
    });
    fs::create_dir_all(&a.out)?;
    let (xt, yt) = to_matrix(&sc.gen_id(sizes.test, "test"));
    let (xo, yo) = to_matrix(&sc.gen_semantic_ood(sizes.test));
    let (xc, yc) = to_matrix(&sc.gen_covariate(&sc.gen_id(sizes.test, "covariate"))?);
    let ya = vec![-1; aux.nrows()];
    let splits = [
        ("id_train", &x, &y, Role::IdTrain),
        ("id_test", &xt, &yt, Role::IdTest),
        ("ood_test", &xo, &yo, Role::OodTest),
        ("covariate_test", &xc, &yc, Role::CovariateTest),
        ("aux_train", &aux, &ya, Role::AuxTrain),
    ];
    for (name, xs, ys, role) in splits {
        if xs.nrows() == 0 {
            continue;
        }
        let pack = export_pack(&model, xs.view(), ys, role, odin)?.with_metadata("loss", spec.loss.as_str());
        write_pack_file(&pack, a.out.join(format!("{name}.shpk")))?;
    }
    let mut ckpt = Vec::new();
    model.write_checkpoint(&mut ckpt)?;
    fs::write(a.out.join("model.ckpt"), ckpt)?;
    let hist = serde_json::to_string_pretty(&history).map_err(|e| Error::Header(e.to_string()))?;
    fs::write(a.out.join("history.json"), hist + "\n")?;
    eprintln!("wrote packs and checkpoint to {}", a.out.display());
    Ok(())
}

fn fitted_scorer(rule: &RuleArgs, fallback: &ShiftPack) -> Result<Scorer> {
    let reference = rule.reference.as_ref().map(read_pack_file).transpose()?;
    Scorer::fit(rule.rule, rule.params(), reference.as_ref().unwrap_or(fallback))
}

fn warn_degenerate(spec: shiftlab_core::RuleSpec) {
    eprintln!("warning: '{spec}' ran without perturbed logits; ODIN degenerates to temperature scaling (ε = 0)");
}

fn score(a: ScoreArgs) -> Result<()> {
    let pack = read_pack_file(&a.pack)?;
    let scorer = fitted_scorer(&a.rule, &pack)?;
    let sv = scorer.score(&pack)?;
    if sv.rule.degenerate {
        warn_degenerate(a.rule.rule);
    }
    let mut text = String::new();
    if a.format == OutputFormat::Csv || a.sidecar.is_some() {
        text.push_str("index,score\n");
        for (i, v) in sv.values.iter().enumerate() {
            text.push_str(&format!("{i},{v:?}\n"));
        }
    } else {
        for v in &sv.values {
            text.push_str(&format!("{v:?}\n"));
        }
    }
    match a.sidecar {
        Some(path) => {
            fs::write(&path, text)?;
            eprintln!("wrote {} scores to {}", sv.values.len(), path.display());
            Ok(())
        }
        None => stdout_write(text.as_bytes()),
    }
}

fn pair_set(id: &Path, shift: &Path, kind: harness::ShiftKind, rule: &RuleArgs) -> Result<EvalSet> {
    let spec = rule.rule;
    let reference = rule.reference.as_ref();
    if reference.is_none() && (spec.transform == Some(Transform::React) || spec.rule == Rule::She) {
        return Err(user(format!("'{spec}' fits on ID training data; pass --reference <id_train pack>")));
    }
    Ok(EvalSet {
        id_train: reference.map(read_pack_file).transpose()?,
        id_test: read_pack_file(id)?,
        id_test_inputs: None,
        shifts: vec![ShiftSet {
            name: "shift".into(),
            kind,
            pack: read_pack_file(shift)?,
            inputs: None,
        }],
        model: None,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let set = pair_set(&a.id, &a.shift, a.kind.into(), &a.rule)?;
    let scorer = fit_scorer(&set, a.rule.rule, a.rule.params())?;
    let scores = score_cell(&set, &scorer, &set.shifts[0])?;
    if scores.degenerate {
        warn_degenerate(a.rule.rule);
    }
    let mut text = String::new();
    if a.format == OutputFormat::Csv {
        text.push_str("metric,value\n");
    }
    for m in a.metric {
        let m: Metric = m.into();
        let v = evaluate_metric(m, &scores)?;
        match a.format {
            OutputFormat::Text => text.push_str(&format!("{v:.4}\n")),
            OutputFormat::Csv => text.push_str(&format!("{m},{v:.4}\n")),
        }
    }
    stdout_write(text.as_bytes())
}

fn matrix(a: MatrixArgs) -> Result<()> {
    let mut cfg = MatrixConfig::load(&a.config)?;
    if a.persist_scores {
        cfg.persist_scores = true;
    }
    let opts = RunOptions {
        jobs: a.jobs,
        scores_dir: cfg.persist_scores.then(|| a.out.join("scores")),
    };
    let table = run_matrix(&cfg, &opts)?;
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    harness::write_reports(&table, &a.out)?;
    let json = serde_json::to_string_pretty(&table).map_err(|e| Error::Header(e.to_string()))?;
    fs::write(a.out.join("results.json"), json + "\n")?;
    let failed = table.cells.values().filter(|c| matches!(c, harness::CellValue::Failed { .. })).count();
    eprintln!("{} cells ({failed} failed) written to {}", table.cells.len(), a.out.display());
    if let Some(f) = a.format {
        stdout_write(&emit_report(&table, table_format(f))?)?;
    }
    Ok(())
}

fn table_format(f: TableFormat) -> ReportFormat {
    match f {
        TableFormat::Csv => ReportFormat::Csv,
        TableFormat::Md => ReportFormat::Markdown,
    }
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let set = pair_set(&a.id, &a.shift, a.kind.into(), &a.rule)?;
    let curve = sweep(a.rule.rule, a.rule.params(), a.param, &a.grid, &set, "shift", a.metric.into())?;
    let mut text = String::new();
    match a.format {
        OutputFormat::Text => {
            for (g, v) in curve.grid.iter().zip(&curve.values) {
                text.push_str(&format!("{g}\t{v:.4}\n"));
            }
            text.push_str(&format!("best\t{}\n", curve.grid[curve.best]));
        }
        OutputFormat::Csv => {
            text.push_str("value,metric,best\n");
            for (i, (g, v)) in curve.grid.iter().zip(&curve.values).enumerate() {
                text.push_str(&format!("{g},{v:.4},{}\n", i == curve.best));
            }
        }
    }
    stdout_write(text.as_bytes())
}

fn named_path(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(spec);
            let n = p.file_stem().map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
            (n, p)
        }
    }
}

fn pack_features(pack: &ShiftPack, layer: Option<&str>, origin: &str) -> Result<FeatureSet> {
    let m = match layer {
        Some(l) => pack.matrix(l)?,
        None => pack.penultimate_features()?,
    };
    FeatureSet::normalize(m.view(), origin)
}

fn proximity(a: ProximityArgs) -> Result<()> {
    if a.study {
        let (sc, sizes) = resolve_scenario(&a.scenario)?;
        let spec = TrainSpec::new(Loss::Oe);
        let st = proximity_correlation(&sc, &a.alphas, &spec, sizes, a.scenario.seed, a.k)?;
        let mut text = String::new();
        let sep = if a.format == OutputFormat::Csv { "," } else { "\t" };
        text.push_str(&["alpha", "dist_nn", "auroc"].join(sep));
        text.push('\n');
        for p in &st.points {
            text.push_str(&format!("{}{sep}{:.4}{sep}{:.4}\n", p.alpha, p.dist_nn, p.auroc));
        }
        match st.spearman {
            Some(r) => eprintln!("spearman(dist_nn, auroc) = {r:.4}"),
            None => eprintln!("spearman(dist_nn, auroc) is undefined (constant column)"),
        }
        return stdout_write(text.as_bytes());
    }
    let ood_path = a.ood.as_ref().ok_or_else(|| user("--ood is required"))?;
    let ood = pack_features(&read_pack_file(ood_path)?, a.layer.as_deref(), "ood")?;
    let mut aux = Vec::new();
    for spec in &a.aux {
        let (name, path) = named_path(spec);
        aux.push(pack_features(&read_pack_file(&path)?, a.layer.as_deref(), &name)?);
    }
    let mut cfg = KernelConfig::default();
    if let Some(e) = a.epsilon {
        cfg.epsilon = e;
    }
    let rows = rank_auxiliaries(&ood, &aux, a.k, &cfg)?;
    let mut text = String::new();
    let sep = if a.format == OutputFormat::Csv { "," } else { "\t" };
    text.push_str(&["aux", "dist_nn", "mmd"].join(sep));
    text.push('\n');
    for r in rows {
        text.push_str(&format!("{}{sep}{:.4}{sep}{:.4}\n", r.name, r.dist_nn, r.mmd));
    }
    stdout_write(text.as_bytes())
}

fn activations(a: ActivationsArgs) -> Result<()> {
    let id = read_pack_file(&a.id)?;
    let mut others = Vec::new();
    for spec in &a.packs {
        let (name, path) = named_path(spec);
        others.push((name, read_pack_file(&path)?));
    }
    let refs: Vec<(&str, &ShiftPack)> = others.iter().map(|(n, p)| (n.as_str(), p)).collect();
    let report = analyze_activations(("id", &id), &refs)?;
    if let Some(path) = &a.histograms {
        fs::write(path, report.to_csv()?)?;
    }
    let sep = if a.format == OutputFormat::Csv { "," } else { "\t" };
    let mut text = format!("layer{sep}pack{sep}overlap\n");
    for l in &report.layers {
        for (n, o) in &l.overlaps {
            text.push_str(&format!("{}{sep}{n}{sep}{o:.4}\n", l.layer));
        }
    }
    if a.norms {
        text.push_str(&format!("\npack{sep}id_mean_norm{sep}shift_mean_norm{sep}norm_auroc\n"));
        for (n, p) in &refs {
            let m = magnitude_report(&id, p)?;
            text.push_str(&format!("{n}{sep}{:.4}{sep}{:.4}{sep}{:.4}\n", m.id_mean_norm, m.shift_mean_norm, m.norm_auroc));
        }
    }
    stdout_write(text.as_bytes())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.table)?;
    let table: ResultTable = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.table.display())))?;
    stdout_write(&emit_report(&table, table_format(a.format))?)
}

fn validate(a: ValidateArgs) -> Result<()> {
    read_pack_file(&a.pack)?;
    stdout_write(b"OK\n")
}
