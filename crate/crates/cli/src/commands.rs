use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use geoflow::actionpipe::{
    self, apply_chunk, chunk_starts, denormalize, fit_norm, make_chunk, normalize, DeltaAction, PipelineError,
    Trajectory,
};
use geoflow::blob::{self, Tensor};
use geoflow::manifest::{config_hash, RunManifest, StagedOutput, MANIFEST_FILE};
use geoflow::scenegeom::io::{read_scene, SCENE_FORMAT_VERSION};
use geoflow::scenegeom::vqa::{generate_vqa, verify_pair, VqaPair, VqaTemplates, VQA_FORMAT_VERSION};
use geoflow::scenegeom::SceneError;
use geoflow::seeding::{self, streams};
use geoflow::so3::{geodesic_angle, norm3, sub3};
use geoflow::tokenizer3d::{fit_vocab, TokenVocab3D, TokenizerError, VOCAB_FORMAT_VERSION};
use geoflow::toytrainer::checkpoint::CHECKPOINT_VERSION;
use geoflow::toytrainer::{
    ablation_csv, ablation_run, metrics_csv, summarize, summary_csv, train, AblationRow, TrainConfig, TrainError,
};

use crate::{AblateArgs, CliError, CliResult, FitTokenizerArgs, GenVqaArgs, PipelineArgs, ReportArgs, TrainToyArgs};

pub const VOCAB_FILE: &str = "vocab.json";
pub const VQA_FILE: &str = "vqa.jsonl";
pub const CHUNKS_FILE: &str = "chunks.blob";
pub const ANCHORS_FILE: &str = "anchors.blob";
pub const STATS_FILE: &str = "stats.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULT_FILE: &str = "result.json";
pub const ROWS_FILE: &str = "rows.json";
pub const RESULTS_FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| io_err(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("value serializes")
}

fn versions(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn begin(out: &Path) -> CliResult<StagedOutput> {
    StagedOutput::begin(out).map_err(|e| io_err(out, e))
}

fn write(stage: &mut StagedOutput, out: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
    stage.write(name, bytes).map_err(|e| io_err(&out.join(name), e))
}

struct Commit<'a> {
    command: &'a str,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<String>,
    versions: BTreeMap<String, u32>,
    notes: BTreeMap<String, Value>,
}

fn commit(stage: StagedOutput, out: &Path, c: Commit) -> CliResult<()> {
    let m = stage
        .commit(c.command, c.config, c.seed, c.inputs, c.versions, c.notes)
        .map_err(|e| io_err(out, e))?;
    println!("{}: wrote {} file(s) to {} ({})", c.command, m.outputs.len(), out.display(), m.content_hash);
    Ok(())
}

fn tokenizer_err(e: TokenizerError) -> CliError {
    CliError::Domain(e.to_string())
}

fn pipeline_err(path: &Path, e: PipelineError) -> CliError {
    match e {
        PipelineError::Parse { .. } | PipelineError::Blob(_) => io_err(path, e),
        other => CliError::Domain(format!("{}: {other}", path.display())),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::DivergenceDetected { .. } => CliError::Divergence(e.to_string()),
        TrainError::Io(_) | TrainError::Blob(_) | TrainError::Checkpoint(_) => CliError::Io(e.to_string()),
        other => CliError::Domain(other.to_string()),
    }
}

/// Text files hold whitespace-separated numbers; files starting with the
/// tensor magic are read as a blob of any rank.
fn read_values(path: &Path) -> CliResult<Vec<f64>> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(blob::MAGIC) {
        let t = Tensor::from_bytes(&bytes).map_err(|e| io_err(path, e))?;
        if let Ok(v) = t.as_f64() {
            return Ok(v.to_vec());
        }
        let v = t.as_f32().map_err(|e| io_err(path, e))?;
        return Ok(v.iter().map(|x| f64::from(*x)).collect());
    }
    let text = String::from_utf8(bytes).map_err(|e| io_err(path, e))?;
    text.split_whitespace()
        .map(|w| w.parse::<f64>().map_err(|e| io_err(path, format!("bad number '{w}': {e}"))))
        .collect()
}

pub fn fit_tokenizer(a: &FitTokenizerArgs) -> CliResult<()> {
    let values = read_values(&a.input)?;
    let vocab = fit_vocab(&values, a.n_bins).map_err(tokenizer_err)?;
    let mut stage = begin(&a.out)?;
    write(&mut stage, &a.out, VOCAB_FILE, vocab.to_json().as_bytes())?;
    let mut notes = BTreeMap::new();
    notes.insert("samples".into(), json!(values.len()));
    commit(
        stage,
        &a.out,
        Commit {
            command: "fit-tokenizer",
            config: json!({ "n_bins": a.n_bins }),
            seed: None,
            inputs: vec![path_str(&a.input)],
            versions: versions(&[("vocab", VOCAB_FORMAT_VERSION)]),
            notes,
        },
    )
}

fn load_vocab(path: &Path) -> CliResult<TokenVocab3D> {
    let file = if path.is_dir() { path.join(VOCAB_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
    let vocab = TokenVocab3D::from_json(&text).map_err(|e| io_err(&file, e))?;
    vocab.validate().map_err(|e| CliError::Domain(format!("{}: {e}", file.display())))?;
    Ok(vocab)
}

#[derive(serde::Serialize)]
struct VqaRecord<'a> {
    scene: String,
    #[serde(flatten)]
    pair: &'a VqaPair,
}

pub fn gen_vqa(a: &GenVqaArgs) -> CliResult<()> {
    let vocab = load_vocab(&a.vocab)?;
    let templates = VqaTemplates::default();
    let mut corpus = String::new();
    let mut records = 0usize;
    let mut skipped = Vec::new();
    for (i, dir) in a.scenes.iter().enumerate() {
        let scene = read_scene(dir).map_err(|e| {
            if e.is_domain() {
                CliError::Domain(e.to_string())
            } else {
                CliError::Io(e.to_string())
            }
        })?;
        let mut rng = seeding::stream(seeding::worker_seed(a.seed, i as u64), streams::VQA);
        let pairs = match generate_vqa(&scene, &vocab, &templates, &mut rng) {
            Ok(p) => p,
            Err(SceneError::NoObjects) => {
                skipped.push(path_str(dir));
                continue;
            }
            Err(e) => return Err(CliError::Domain(format!("{}: {e}", dir.display()))),
        };
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for pair in &pairs {
            verify_pair(&scene, &vocab, pair)
                .map_err(|e| CliError::Domain(format!("{}: record failed its check: {e}", dir.display())))?;
            let rec = VqaRecord {
                scene: name.clone(),
                pair,
            };
            corpus.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            corpus.push('\n');
            records += 1;
        }
    }
    if records == 0 {
        return Err(CliError::Domain("no scene has any object that can be asked about".into()));
    }
    let mut stage = begin(&a.out)?;
    write(&mut stage, &a.out, VQA_FILE, corpus.as_bytes())?;
    let mut notes = BTreeMap::new();
    notes.insert("records".into(), json!(records));
    notes.insert("skipped_scenes".into(), json!(skipped));
    let mut inputs: Vec<String> = a.scenes.iter().map(|p| path_str(p)).collect();
    inputs.push(path_str(&a.vocab));
    commit(
        stage,
        &a.out,
        Commit {
            command: "gen-vqa",
            config: json!({ "templates": templates, "vocab_n_bins": vocab.n_bins }),
            seed: Some(a.seed),
            inputs,
            versions: versions(&[
                ("scene", SCENE_FORMAT_VERSION),
                ("vocab", VOCAB_FORMAT_VERSION),
                ("vqa", VQA_FORMAT_VERSION),
            ]),
            notes,
        },
    )
}

fn read_trajectory(path: &Path) -> CliResult<Trajectory> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(blob::MAGIC) {
        let t = Tensor::from_bytes(&bytes).map_err(|e| io_err(path, e))?;
        return actionpipe::trajectory_from_tensor(&t).map_err(|e| pipeline_err(path, e));
    }
    let text = String::from_utf8(bytes).map_err(|e| io_err(path, e))?;
    actionpipe::parse_jsonl(&text).map_err(|e| pipeline_err(path, e))
}

struct ChunkSet {
    anchor: actionpipe::Pose,
    deltas: Vec<DeltaAction>,
    targets: Vec<actionpipe::Pose>,
}

pub fn pipeline(a: &PipelineArgs) -> CliResult<()> {
    if a.horizon == 0 {
        return Err(CliError::Domain("horizon must be positive".into()));
    }
    let stride = a.stride.unwrap_or(a.horizon);
    if stride == 0 {
        return Err(CliError::Domain("stride must be positive".into()));
    }
    let mut sets = Vec::new();
    for path in &a.trajs {
        let traj = read_trajectory(path)?;
        let res = actionpipe::resample(&traj, a.dst_hz).map_err(|e| pipeline_err(path, e))?;
        let starts = chunk_starts(res.len(), a.horizon, stride);
        if starts.is_empty() {
            return Err(CliError::Domain(format!(
                "{}: trajectory too short: {} resampled poses leave no room for a chunk of {}",
                path.display(),
                res.len(),
                a.horizon
            )));
        }
        for s in starts {
            let deltas = make_chunk(&res, s, a.horizon).map_err(|e| pipeline_err(path, e))?;
            sets.push(ChunkSet {
                anchor: res.poses[s],
                deltas,
                targets: res.poses[s + 1..=s + a.horizon].to_vec(),
            });
        }
    }
    let all: Vec<DeltaAction> = sets.iter().flat_map(|c| c.deltas.iter().copied()).collect();
    let stats = fit_norm(&all, a.scheme).map_err(|e| CliError::Domain(e.to_string()))?;

    let mut chunk_values = Vec::with_capacity(all.len() * 8);
    let mut anchor_values = Vec::with_capacity(sets.len() * 9);
    let mut max_trans = 0.0f64;
    let mut max_geo = 0.0f64;
    for c in &sets {
        let normed: Vec<_> = c.deltas.iter().map(|d| normalize(d, &stats)).collect();
        for n in &normed {
            chunk_values.extend_from_slice(&n.x);
            chunk_values.extend_from_slice(&n.q.to_array());
            chunk_values.push(n.g);
        }
        let p = &c.anchor;
        anchor_values.push(p.stamp);
        anchor_values.extend_from_slice(&p.t);
        anchor_values.extend_from_slice(&p.r.to_array());
        anchor_values.push(p.g);
        if a.verify {
            let back: Vec<DeltaAction> = normed.iter().map(|n| denormalize(n, &stats)).collect();
            for (got, want) in apply_chunk(&c.anchor, &back, 1.0 / a.dst_hz).iter().zip(&c.targets) {
                max_trans = max_trans.max(norm3(sub3(got.t, want.t)));
                max_geo = max_geo.max(geodesic_angle(&got.r, &want.r));
            }
        }
    }
    let chunks = Tensor::f64(vec![sets.len(), a.horizon, 8], chunk_values).expect("chunk shape");
    let anchors = Tensor::f64(vec![sets.len(), 9], anchor_values).expect("anchor shape");

    let mut stage = begin(&a.out)?;
    write(&mut stage, &a.out, CHUNKS_FILE, &chunks.to_bytes())?;
    write(&mut stage, &a.out, ANCHORS_FILE, &anchors.to_bytes())?;
    let stats_json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    write(&mut stage, &a.out, STATS_FILE, stats_json.as_bytes())?;
    let mut notes = BTreeMap::new();
    notes.insert("chunks".into(), json!(sets.len()));
    if a.verify {
        println!("roundtrip: max translation error {max_trans:.3e}, max geodesic error {max_geo:.3e} rad");
        notes.insert("verify_max_translation_error".into(), json!(max_trans));
        notes.insert("verify_max_geodesic_error".into(), json!(max_geo));
    }
    commit(
        stage,
        &a.out,
        Commit {
            command: "pipeline",
            config: json!({
                "dst_hz": a.dst_hz,
                "horizon": a.horizon,
                "stride": stride,
                "scheme": a.scheme,
            }),
            seed: None,
            inputs: a.trajs.iter().map(|p| path_str(p)).collect(),
            versions: versions(&[("blob", blob::BLOB_VERSION), ("norm", actionpipe::NORM_FORMAT_VERSION)]),
            notes,
        },
    )
}

fn result_row(cfg: &TrainConfig, out: &geoflow::toytrainer::TrainOutcome) -> AblationRow {
    let (e, m) = (out.final_eval(), out.final_ema_eval());
    AblationRow {
        name: cfg.name.clone(),
        config_hash: config_hash(&TrainConfig { seed: 0, ..cfg.clone() }),
        seed: cfg.seed,
        geo_err: e.geo,
        trans_err: e.trans,
        ema_geo_err: m.geo,
        ema_trans_err: m.trans,
    }
}

fn training_versions() -> BTreeMap<String, u32> {
    versions(&[
        ("blob", blob::BLOB_VERSION),
        ("checkpoint", CHECKPOINT_VERSION),
        ("results", RESULTS_FORMAT_VERSION),
    ])
}

pub fn train_toy(a: &TrainToyArgs) -> CliResult<()> {
    let mut cfg: TrainConfig = read_json(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let clock = Instant::now();
    let outcome = train(&cfg).map_err(train_err)?;
    let secs = clock.elapsed().as_secs_f64();
    let row = result_row(&cfg, &outcome);

    let mut stage = begin(&a.out)?;
    write(&mut stage, &a.out, METRICS_FILE, metrics_csv(&outcome.metrics).as_bytes())?;
    for c in &outcome.checkpoints {
        let name = format!("checkpoints/step_{:07}.ckpt", c.header.step);
        write(&mut stage, &a.out, &name, &c.to_bytes())?;
    }
    let result = serde_json::to_string_pretty(&row).expect("row serializes");
    write(&mut stage, &a.out, RESULT_FILE, result.as_bytes())?;
    let mut notes = BTreeMap::new();
    notes.insert("wall_seconds".into(), json!(secs));
    notes.insert("final_eval".into(), to_json(&outcome.final_eval()));
    notes.insert("final_ema_eval".into(), to_json(&outcome.final_ema_eval()));
    println!(
        "trained {} steps in {secs:.1} s: ema geodesic {:.4} rad, ema translation {:.4}",
        cfg.steps, row.ema_geo_err, row.ema_trans_err
    );
    commit(
        stage,
        &a.out,
        Commit {
            command: "train-toy",
            config: to_json(&cfg),
            seed: Some(cfg.seed),
            inputs: vec![path_str(&a.config)],
            versions: training_versions(),
            notes,
        },
    )
}

pub fn ablate(a: &AblateArgs) -> CliResult<()> {
    let grid: Vec<TrainConfig> = read_json(&a.grid)?;
    let seeds: Vec<u64> = (0..a.n_seeds).map(|i| seeding::worker_seed(a.seed, i)).collect();
    let clock = Instant::now();
    let rows = ablation_run(&grid, &seeds).map_err(train_err)?;
    let secs = clock.elapsed().as_secs_f64();

    let mut stage = begin(&a.out)?;
    write(&mut stage, &a.out, "ablation.csv", ablation_csv(&rows).as_bytes())?;
    write(&mut stage, &a.out, "summary.csv", summary_csv(&summarize(&rows)).as_bytes())?;
    let json_rows = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write(&mut stage, &a.out, ROWS_FILE, json_rows.as_bytes())?;
    let mut notes = BTreeMap::new();
    notes.insert("wall_seconds".into(), json!(secs));
    commit(
        stage,
        &a.out,
        Commit {
            command: "ablate",
            config: json!({ "grid": grid, "seeds": seeds }),
            seed: Some(a.seed),
            inputs: vec![path_str(&a.grid)],
            versions: training_versions(),
            notes,
        },
    )
}

fn load_run(dir: &Path) -> CliResult<(RunManifest, Vec<AblationRow>)> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Domain(format!("{}: no {MANIFEST_FILE}; not a finished run", dir.display())));
    }
    let m = RunManifest::read(dir).map_err(|e| io_err(&dir.join(MANIFEST_FILE), e))?;
    let rows = if dir.join(ROWS_FILE).is_file() {
        read_json(&dir.join(ROWS_FILE))?
    } else if dir.join(RESULT_FILE).is_file() {
        vec![read_json(&dir.join(RESULT_FILE))?]
    } else {
        return Err(CliError::Domain(format!(
            "{}: {} run has no training results",
            dir.display(),
            m.command
        )));
    };
    Ok((m, rows))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

pub fn report(a: &ReportArgs) -> CliResult<()> {
    if a.runs.is_empty() {
        return Err(CliError::Domain("report needs at least one run directory".into()));
    }
    let mut seen: BTreeMap<String, (u32, PathBuf)> = BTreeMap::new();
    let mut rows: Vec<(AblationRow, String)> = Vec::new();
    for dir in &a.runs {
        let (m, run_rows) = load_run(dir)?;
        let mut fv = m.format_versions.clone();
        fv.insert("manifest".into(), m.manifest_version);
        for (k, v) in fv {
            match seen.get(&k) {
                Some((prev, prev_dir)) if *prev != v => {
                    return Err(CliError::Domain(format!(
                        "incompatible {k} format versions: {prev} in {} vs {v} in {}",
                        prev_dir.display(),
                        dir.display()
                    )));
                }
                Some(_) => {}
                None => {
                    seen.insert(k, (v, dir.clone()));
                }
            }
        }
        let run = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        rows.extend(run_rows.into_iter().map(|r| (r, run.clone())));
    }
    rows.sort_by(|(x, rx), (y, ry)| {
        (&x.config_hash, x.seed, &x.name, rx).cmp(&(&y.config_hash, y.seed, &y.name, ry))
    });

    let mut csv = String::from("config_hash,name,seed,run,geo_err,trans_err,ema_geo_err,ema_trans_err\n");
    for (r, run) in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.config_hash, r.name, r.seed, run, r.geo_err, r.trans_err, r.ema_geo_err, r.ema_trans_err
        ));
    }

    let mut md = String::from("# Training report\n\n");
    md.push_str("Errors are from the EMA weights at the final step; std is the sample std over seeds.\n\n");
    md.push_str("| config | hash | seeds | geodesic (rad) | translation |\n|---|---|---|---|---|\n");
    let mut i = 0;
    while i < rows.len() {
        let hash = &rows[i].0.config_hash;
        let j = i + rows[i..].iter().take_while(|(r, _)| &r.config_hash == hash).count();
        let group: Vec<&AblationRow> = rows[i..j].iter().map(|(r, _)| r).collect();
        let (gm, gs) = mean_std(&group.iter().map(|r| r.ema_geo_err).collect::<Vec<_>>());
        let (tm, ts) = mean_std(&group.iter().map(|r| r.ema_trans_err).collect::<Vec<_>>());
        md.push_str(&format!(
            "| {} | {} | {} | {gm:.4} ± {gs:.4} | {tm:.4} ± {ts:.4} |\n",
            group[0].name,
            &hash[..hash.len().min(12)],
            group.len()
        ));
        i = j;
    }
    md.push_str("\n## Per seed\n\n| config | seed | run | geodesic (rad) | translation |\n|---|---|---|---|---|\n");
    for (r, run) in &rows {
        md.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} |\n",
            r.name, r.seed, run, r.ema_geo_err, r.ema_trans_err
        ));
    }

    let mut stage = begin(&a.out)?;
    write(&mut stage, &a.out, "report.csv", csv.as_bytes())?;
    write(&mut stage, &a.out, "report.md", md.as_bytes())?;
    commit(
        stage,
        &a.out,
        Commit {
            command: "report",
            config: json!({ "runs": a.runs.len() }),
            seed: None,
            inputs: a.runs.iter().map(|p| path_str(p)).collect(),
            versions: seen.into_iter().map(|(k, (v, _))| (k, v)).collect(),
            notes: BTreeMap::new(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_one_value() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
