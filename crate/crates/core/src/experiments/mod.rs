//! Config-driven experiment runner.
//!
//! An experiment is described by a TOML file with an `id`, a `kind` and a
//! `[params]` table. [`run`] executes it under a master seed and writes the
//! results atomically to `<root>/<id>/<timestamp>/` together with a manifest
//! holding SHA-256 digests of every output file. [`rerun`] replays a manifest
//! and compares digests.

mod checks;
mod stochastic;

pub use checks::{
    d_bound, decomposition_check, entropy, hz_gap_report, localization_rate, DBoundParams,
    DBoundResult, DecompositionParams, DecompositionResult, EntropyParams, EntropyResult,
    HzGapParams, HzGapRow, LocalizationParams, LocalizationResult, RecursionParams,
    RecursionResult, SamplerCheck, TOrderParams, TOrderResult,
};
pub use stochastic::{
    chung_diagnostic, lambda_fit, max_covariance_z, min_grid, prop_h, prop_z, theorem_u,
    ChungParams, ChungResult, Convention, GridEstimate, LambdaFitParams, LambdaFitResult,
    MinGridParams, MinGridSummary, ModerateCheck, PropHParams, PropHResult, PropZParams,
    PropZResult, TheoremUParams, TheoremUResult, TransferCheck,
};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, ResultExt};
use crate::rng::RngStream;

/// Parameters for each experiment kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ExperimentParams {
    LambdaFit(LambdaFitParams),
    #[serde(rename = "prop_H_constant")]
    PropHConstant(PropHParams),
    #[serde(rename = "prop_Z_constant")]
    PropZConstant(PropZParams),
    TheoremU(TheoremUParams),
    DecompositionCheck(DecompositionParams),
    LocalizationRate(LocalizationParams),
    ChungDiagnostic(ChungParams),
    MinGrid(MinGridParams),
    Recursion(RecursionParams),
    Entropy(EntropyParams),
    DBound(DBoundParams),
    HzGap(HzGapParams),
}

pub const KINDS: [&str; 12] = [
    "lambda_fit",
    "prop_H_constant",
    "prop_Z_constant",
    "theorem_u",
    "decomposition_check",
    "localization_rate",
    "chung_diagnostic",
    "min_grid",
    "recursion",
    "entropy",
    "d_bound",
    "hz_gap",
];

impl ExperimentParams {
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentParams::LambdaFit(_) => KINDS[0],
            ExperimentParams::PropHConstant(_) => KINDS[1],
            ExperimentParams::PropZConstant(_) => KINDS[2],
            ExperimentParams::TheoremU(_) => KINDS[3],
            ExperimentParams::DecompositionCheck(_) => KINDS[4],
            ExperimentParams::LocalizationRate(_) => KINDS[5],
            ExperimentParams::ChungDiagnostic(_) => KINDS[6],
            ExperimentParams::MinGrid(_) => KINDS[7],
            ExperimentParams::Recursion(_) => KINDS[8],
            ExperimentParams::Entropy(_) => KINDS[9],
            ExperimentParams::DBound(_) => KINDS[10],
            ExperimentParams::HzGap(_) => KINDS[11],
        }
    }

    /// The statement each kind targets, in plain words.
    pub fn target(&self) -> &'static str {
        match self {
            ExperimentParams::LambdaFit(_) => {
                "small-ball constant: minus the limit of eps^k log P{sup |X| <= eps} as eps -> 0"
            }
            ExperimentParams::PropHConstant(_) => {
                "moderate small-ball constant of the free-space field H at radius (eps/phi(eps))^(1/4) on [0, eps], and exact time scaling of H"
            }
            ExperimentParams::PropZConstant(_) => "the torus field Z has the same moderate small-ball constant as H",
            ExperimentParams::TheoremU(_) => {
                "moderate small-ball rate of the solution u scales with sigma(u0(x))^4"
            }
            ExperimentParams::DecompositionCheck(_) => {
                "fBm(1/4) is a constant multiple of H + T with H and T independent; samplers reproduce their covariances"
            }
            ExperimentParams::LocalizationRate(_) => {
                "u minus its linearization about u0 is O(sqrt(t) log(1/t)) uniformly in space"
            }
            ExperimentParams::ChungDiagnostic(_) => {
                "Chung-type law: liminf of sup_[0,t] |H| / psi(t) as t -> 0 is a positive constant"
            }
            ExperimentParams::MinGrid(_) => {
                "probability that some site of a slowed dyadic grid keeps H_n small decays like n^(exponent)"
            }
            ExperimentParams::Recursion(_) => "a_n / (c n / 4)^4 -> 1 for a_(j+1) = a_j + c a_j^(3/4)",
            ExperimentParams::Entropy(_) => {
                "covering numbers of [0,1] under the canonical distance of T grow like 1/eps, and T has small-ball rate exp(-L/r)"
            }
            ExperimentParams::DBound(_) => {
                "canonical distance of T is bounded by c |t-s|^(1/4) min(1, (|t-s|/(s^t))^(3/4)) and is Lipschitz away from 0"
            }
            ExperimentParams::HzGap(_) => "Var(H(t,0) - Z(t,0)) <= 5t",
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ExperimentParams::LambdaFit(p) => p.validate(),
            ExperimentParams::PropHConstant(p) => p.validate(),
            ExperimentParams::PropZConstant(p) => p.validate(),
            ExperimentParams::TheoremU(p) => p.validate(),
            ExperimentParams::DecompositionCheck(p) => p.validate(),
            ExperimentParams::LocalizationRate(p) => p.validate(),
            ExperimentParams::ChungDiagnostic(p) => p.validate(),
            ExperimentParams::MinGrid(p) => p.validate(),
            ExperimentParams::Recursion(p) => p.validate(),
            ExperimentParams::Entropy(p) => p.validate(),
            ExperimentParams::DBound(p) => p.validate(),
            ExperimentParams::HzGap(p) => p.validate(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    #[serde(flatten)]
    pub params: ExperimentParams,
}

fn parse_params<T: serde::de::DeserializeOwned>(value: toml::Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." {
            "params".to_string()
        } else {
            format!("params.{path}")
        };
        Error::config(path, e.into_inner().to_string())
    })
}

impl ExperimentSpec {
    /// Parse and validate a TOML experiment description.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("", e.message().to_string()))?;
        for key in table.keys() {
            if !["id", "kind", "params"].contains(&key.as_str()) {
                return Err(Error::config(
                    key.clone(),
                    "unknown field; expected id, kind or params",
                ));
            }
        }
        let id = match table.get("id") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::config("id", "must be a string")),
            None => return Err(Error::config("id", "missing field")),
        };
        let kind = match table.get("kind") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::config("kind", "must be a string")),
            None => return Err(Error::config("kind", "missing field")),
        };
        let params = match table.get("params") {
            Some(v @ toml::Value::Table(_)) => v.clone(),
            Some(_) => return Err(Error::config("params", "must be a table")),
            None => toml::Value::Table(toml::Table::new()),
        };
        let params = match kind.as_str() {
            "lambda_fit" => ExperimentParams::LambdaFit(parse_params(params)?),
            "prop_H_constant" => ExperimentParams::PropHConstant(parse_params(params)?),
            "prop_Z_constant" => ExperimentParams::PropZConstant(parse_params(params)?),
            "theorem_u" => ExperimentParams::TheoremU(parse_params(params)?),
            "decomposition_check" => ExperimentParams::DecompositionCheck(parse_params(params)?),
            "localization_rate" => ExperimentParams::LocalizationRate(parse_params(params)?),
            "chung_diagnostic" => ExperimentParams::ChungDiagnostic(parse_params(params)?),
            "min_grid" => ExperimentParams::MinGrid(parse_params(params)?),
            "recursion" => ExperimentParams::Recursion(parse_params(params)?),
            "entropy" => ExperimentParams::Entropy(parse_params(params)?),
            "d_bound" => ExperimentParams::DBound(parse_params(params)?),
            "hz_gap" => ExperimentParams::HzGap(parse_params(params)?),
            other => {
                return Err(Error::config(
                    "kind",
                    format!(
                        "unknown kind `{other}`; expected one of {}",
                        KINDS.join(", ")
                    ),
                ))
            }
        };
        let spec = ExperimentSpec { id, params };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(Error::from)
            .context(format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::config(
                "id",
                "must be nonempty and use only letters, digits, '-' and '_'",
            ));
        }
        self.params.validate()
    }
}

/// One output file, held in memory until the run is committed.
#[derive(Clone, Debug)]
pub struct OutputFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// A row of the summary table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub quantity: String,
    pub value: String,
    pub reference: String,
}

impl SummaryRow {
    pub(crate) fn new(
        quantity: impl Into<String>,
        value: impl Into<String>,
        reference: impl Into<String>,
    ) -> Self {
        Self {
            quantity: quantity.into(),
            value: value.into(),
            reference: reference.into(),
        }
    }
}

/// In-memory result of an experiment.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub files: Vec<OutputFile>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Serialize)]
struct Targeted<'a, T: Serialize> {
    target: &'a str,
    #[serde(flatten)]
    result: &'a T,
}

pub(crate) fn json_file<T: Serialize>(name: &str, target: &str, result: &T) -> Result<OutputFile> {
    let mut bytes = serde_json::to_vec_pretty(&Targeted { target, result })?;
    bytes.push(b'\n');
    Ok(OutputFile {
        name: name.into(),
        bytes,
    })
}

pub(crate) fn csv_file(
    name: &str,
    target: &str,
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> OutputFile {
    let mut s = format!("# target: {target}\n{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    OutputFile {
        name: name.into(),
        bytes: s.into_bytes(),
    }
}

/// Run the experiment without touching the filesystem.
pub fn execute(spec: &ExperimentSpec, seed: u64) -> Result<Outcome> {
    spec.validate()?;
    let rng = RngStream::new(seed, 0);
    let target = spec.params.target();
    let kind = spec.params.kind();
    let out = match &spec.params {
        ExperimentParams::LambdaFit(p) => stochastic::lambda_fit_outcome(p, target, rng),
        ExperimentParams::PropHConstant(p) => stochastic::prop_h_outcome(p, target, rng),
        ExperimentParams::PropZConstant(p) => stochastic::prop_z_outcome(p, target, rng),
        ExperimentParams::TheoremU(p) => stochastic::theorem_u_outcome(p, target, rng),
        ExperimentParams::ChungDiagnostic(p) => stochastic::chung_outcome(p, target, rng),
        ExperimentParams::MinGrid(p) => stochastic::min_grid_outcome(p, target, rng),
        ExperimentParams::DecompositionCheck(p) => checks::decomposition_outcome(p, target, rng),
        ExperimentParams::LocalizationRate(p) => checks::localization_outcome(p, target, rng),
        ExperimentParams::Recursion(p) => checks::recursion_outcome(p, target),
        ExperimentParams::Entropy(p) => checks::entropy_outcome(p, target, rng),
        ExperimentParams::DBound(p) => checks::d_bound_outcome(p, target, rng),
        ExperimentParams::HzGap(p) => checks::hz_gap_outcome(p, target),
    };
    out.context(format!("experiment `{}` ({kind})", spec.id))
}

/// Run `f` on a dedicated pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment_id: String,
    pub kind: String,
    pub target: String,
    pub seed: u64,
    pub tool_version: String,
    pub started: String,
    pub finished: String,
    pub config: ExperimentSpec,
    pub files: Vec<FileDigest>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn summary_markdown(spec: &ExperimentSpec, seed: u64, rows: &[SummaryRow]) -> OutputFile {
    let mut s = format!(
        "# {}\n\nkind: `{}`  \nseed: {}  \ntarget: {}\n\n| quantity | value | reference |\n|---|---|---|\n",
        spec.id,
        spec.params.kind(),
        seed,
        spec.params.target()
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} |\n",
            r.quantity, r.value, r.reference
        ));
    }
    OutputFile {
        name: "summary.md".into(),
        bytes: s.into_bytes(),
    }
}

fn now_rfc3339() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

fn stamp_dir_name(rfc3339: &str) -> String {
    rfc3339.chars().filter(|c| *c != '-' && *c != ':').collect()
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: ExperimentManifest,
    pub summary: Vec<SummaryRow>,
}

/// Execute and persist under `root/<id>/<timestamp>/`.
///
/// Files are written to a hidden sibling directory which is renamed into
/// place once everything, including the manifest, is on disk.
pub fn run(spec: &ExperimentSpec, seed: u64, root: &Path) -> Result<RunOutput> {
    let started = now_rfc3339();
    let outcome = execute(spec, seed)?;
    let finished = now_rfc3339();
    let mut files = outcome.files;
    files.push(summary_markdown(spec, seed, &outcome.summary));
    let digests: Vec<FileDigest> = files
        .iter()
        .map(|f| FileDigest {
            name: f.name.clone(),
            sha256: digest(&f.bytes),
            bytes: f.bytes.len() as u64,
        })
        .collect();
    let manifest = ExperimentManifest {
        experiment_id: spec.id.clone(),
        kind: spec.params.kind().into(),
        target: spec.params.target().into(),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started: started.clone(),
        finished,
        config: spec.clone(),
        files: digests,
    };
    let parent = root.join(&spec.id);
    fs::create_dir_all(&parent)
        .map_err(Error::from)
        .context(format!("creating {}", parent.display()))?;
    let base = stamp_dir_name(&started);
    let tmp = parent.join(format!(".{base}.{}.tmp", std::process::id()));
    let write_all = || -> Result<()> {
        fs::create_dir_all(&tmp)?;
        for f in &files {
            fs::write(tmp.join(&f.name), &f.bytes)?;
        }
        let mut m = serde_json::to_vec_pretty(&manifest)?;
        m.push(b'\n');
        fs::write(tmp.join("manifest.json"), m)?;
        Ok(())
    };
    if let Err(e) = write_all() {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e)
            .map_err(Error::from)
            .context(format!("writing results under {}", parent.display()));
    }
    let mut dir = parent.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = parent.join(format!("{base}-{k}"));
        k += 1;
    }
    fs::rename(&tmp, &dir)
        .map_err(Error::from)
        .context(format!("committing {}", dir.display()))?;
    Ok(RunOutput {
        dir,
        manifest,
        summary: outcome.summary,
    })
}

pub fn read_manifest(path: &Path) -> Result<ExperimentManifest> {
    let bytes = fs::read(path)
        .map_err(Error::from)
        .context(format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Clone, Debug)]
pub struct RerunReport {
    pub original: ExperimentManifest,
    pub rerun: RunOutput,
    /// Files whose digest differs or which are missing on one side.
    pub mismatches: Vec<String>,
}

impl RerunReport {
    pub fn identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Replay a manifest. Results go to `root`, or next to the original run.
pub fn rerun(manifest_path: &Path, root: Option<&Path>) -> Result<RerunReport> {
    let original = read_manifest(manifest_path)?;
    let default_root = manifest_path
        .parent()
        .and_then(Path::parent)
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("results"));
    let root = root.map(Path::to_path_buf).unwrap_or(default_root);
    let again = run(&original.config, original.seed, &root)?;
    let mut mismatches = Vec::new();
    for f in &original.files {
        match again.manifest.files.iter().find(|g| g.name == f.name) {
            Some(g) if g.sha256 == f.sha256 => {}
            Some(_) => mismatches.push(format!("{}: digest differs", f.name)),
            None => mismatches.push(format!("{}: missing in rerun", f.name)),
        }
    }
    for g in &again.manifest.files {
        if !original.files.iter().any(|f| f.name == g.name) {
            mismatches.push(format!("{}: not in original", g.name));
        }
    }
    Ok(RerunReport {
        original,
        rerun: again,
        mismatches,
    })
}

pub(crate) fn config_err(field: &str, msg: impl Into<String>) -> Error {
    Error::config(format!("params.{field}"), msg)
}

pub(crate) fn require(cond: bool, field: &str, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(config_err(field, msg))
    }
}

/// `|a - b| <= sqrt(ha^2 + hb^2)`.
pub(crate) fn jointly_agree(a: f64, ha: f64, b: f64, hb: f64) -> bool {
    (a - b).abs() <= (ha * ha + hb * hb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_errors_carry_field_paths() {
        let err =
            ExperimentSpec::from_toml("id = \"x\"\nkind = \"recursion\"\n[params]\ncs = \"no\"\n")
                .unwrap_err();
        assert!(
            matches!(&err, Error::Config { path, .. } if path == "params.cs"),
            "{err}"
        );
        let err =
            ExperimentSpec::from_toml("id = \"x\"\nkind = \"recursion\"\n[params]\nbogus = 1\n")
                .unwrap_err();
        assert!(
            matches!(&err, Error::Config { path, .. } if path.starts_with("params")),
            "{err}"
        );
        let err = ExperimentSpec::from_toml("id = \"x\"\nkind = \"nope\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "kind"));
        let err = ExperimentSpec::from_toml("id = \"a b\"\nkind = \"hz_gap\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "id"));
        let err = ExperimentSpec::from_toml(
            "id = \"x\"\nkind = \"lambda_fit\"\n[params]\nepsilons = [0.3, -0.2, 0.1]\n",
        )
        .unwrap_err();
        assert!(
            matches!(&err, Error::Config { path, .. } if path == "params.epsilons"),
            "{err}"
        );
        let err = ExperimentSpec::from_toml(
            "id = \"x\"\nkind = \"lambda_fit\"\n[params.splitting]\nparticles = \"many\"\n",
        )
        .unwrap_err();
        assert!(
            matches!(&err, Error::Config { path, .. } if path == "params.splitting.particles"),
            "{err}"
        );
    }

    #[test]
    fn every_kind_parses_with_defaults() {
        for kind in KINDS {
            let extra = match kind {
                "prop_H_constant" | "min_grid" => "[params]\nlambda_hat = 0.5\n",
                _ => "",
            };
            let spec =
                ExperimentSpec::from_toml(&format!("id = \"t\"\nkind = \"{kind}\"\n{extra}"))
                    .unwrap();
            assert_eq!(spec.params.kind(), kind);
            let json = serde_json::to_string(&spec).unwrap();
            let back: ExperimentSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(serde_json::to_string(&back).unwrap(), json);
        }
    }

    #[test]
    fn run_writes_manifest_and_rerun_matches() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec::from_toml(
            "id = \"rec\"\nkind = \"recursion\"\n[params]\ncs = [1.0]\nindices = [10, 1000]\n",
        )
        .unwrap();
        let out = run(&spec, 3, dir.path()).unwrap();
        assert!(out.dir.join("manifest.json").exists());
        assert!(out.dir.join("summary.md").exists());
        for f in &out.manifest.files {
            let bytes = fs::read(out.dir.join(&f.name)).unwrap();
            assert_eq!(digest(&bytes), f.sha256);
        }
        let report = rerun(&out.dir.join("manifest.json"), None).unwrap();
        assert!(report.identical(), "{:?}", report.mismatches);
        assert_ne!(report.rerun.dir, out.dir);
        assert_eq!(report.rerun.dir.parent(), out.dir.parent());
        let leftovers: Vec<_> = fs::read_dir(out.dir.parent().unwrap())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with('.')
            })
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn agreement_helper() {
        assert!(jointly_agree(1.0, 0.3, 1.4, 0.4));
        assert!(!jointly_agree(1.0, 0.1, 1.4, 0.1));
    }
}
