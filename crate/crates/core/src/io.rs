//! Persistence for solver artifacts. Every artifact is a directory holding
//! a small `manifest.json` (versioned, structured metadata) plus flat
//! binary arrays of little-endian 64-bit floats, each integrity-checked by
//! a SHA-256 digest recorded in the manifest. Loads verify digests and
//! dimensions before constructing anything. Timing data is never persisted,
//! so re-running a configuration reproduces artifacts byte for byte.

use crate::error::{Error, Result};
use crate::field::{SampleSet, VariableKind};
use crate::latin::{LatinState, StopReason, StressHistory, Triplet, TripletStats};
use crate::mcs::EnsembleResult;
use crate::timegrid::TimeGrid;
use crate::update::ReducedSolution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    /// Number of 64-bit floats in the file.
    len: usize,
    /// Hex SHA-256 of the file's raw bytes.
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplesMeta {
    n_samples: usize,
    specs: Vec<VariableKind>,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateManifest {
    format_version: u32,
    kind: String,
    n_terms: usize,
    n_dofs: usize,
    n_elements: usize,
    grid: TimeGrid,
    samples: SamplesMeta,
    eps_u_log: Vec<f64>,
    stats: Vec<TripletStats>,
    global_solves: usize,
    stop_reason: StopReason,
    config_snapshot: String,
    arrays: BTreeMap<String, ArrayEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleManifest {
    format_version: u32,
    kind: String,
    n_steps: usize,
    n_dofs: usize,
    tracked_dofs: Vec<usize>,
    samples: SamplesMeta,
    converged: Vec<bool>,
    yielded: Vec<bool>,
    total_newton_iterations: usize,
    arrays: BTreeMap<String, ArrayEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReducedManifest {
    format_version: u32,
    kind: String,
    n_samples: usize,
    k: usize,
    n_dofs: usize,
    grid: TimeGrid,
    converged: Vec<bool>,
    iterations: Vec<usize>,
    arrays: BTreeMap<String, ArrayEntry>,
}

fn digest_hex(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in out {
        use std::fmt::Write;
        write!(s, "{b:02x}").expect("infallible");
    }
    s
}

fn write_array(dir: &Path, name: &str, values: &[f64]) -> Result<ArrayEntry> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let entry = ArrayEntry {
        len: values.len(),
        sha256: digest_hex(&bytes),
    };
    fs::write(dir.join(format!("{name}.bin")), bytes)?;
    Ok(entry)
}

fn read_array(dir: &Path, name: &str, entry: &ArrayEntry) -> Result<Vec<f64>> {
    let path = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&path)?;
    if bytes.len() != entry.len * 8 {
        return Err(Error::Integrity(format!(
            "{}: expected {} floats, file holds {} bytes",
            path.display(),
            entry.len,
            bytes.len()
        )));
    }
    let got = digest_hex(&bytes);
    if got != entry.sha256 {
        return Err(Error::Integrity(format!(
            "{}: digest mismatch (manifest {}, file {})",
            path.display(),
            entry.sha256,
            got
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
        .collect())
}

fn write_manifest<M: Serialize>(dir: &Path, manifest: &M) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Integrity(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join(MANIFEST_NAME), text + "\n")?;
    Ok(())
}

fn read_manifest<M: for<'de> Deserialize<'de>>(dir: &Path, expected_kind: &str) -> Result<M> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("{}: not valid JSON: {e}", path.display())))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Integrity(format!(
            "{}: unsupported format version {version:?}",
            path.display()
        )));
    }
    let kind = value.get("kind").and_then(|v| v.as_str());
    if kind != Some(expected_kind) {
        return Err(Error::Integrity(format!(
            "{}: artifact kind {kind:?}, expected {expected_kind:?}",
            path.display()
        )));
    }
    serde_json::from_value(value)
        .map_err(|e| Error::Integrity(format!("{}: malformed manifest: {e}", path.display())))
}

/// Persist a solver state (terms, samples, logs, stress history) to `dir`.
pub fn save_state(dir: &Path, state: &LatinState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n_s = state.samples.n_samples();
    let n_t = state.grid.n_steps();
    let n_dofs = state.triplets.first().map_or(0, |t| t.shape.len());
    let mut flat = Vec::new();
    for t in &state.triplets {
        flat.extend_from_slice(&t.coeffs);
        flat.extend_from_slice(&t.profile);
        flat.extend_from_slice(&t.shape);
    }
    let (hs, he, ht) = state.stress_history.dims();
    if hs != n_s || ht != n_t {
        return Err(Error::DimensionMismatch(
            "stress history does not match the state dimensions".into(),
        ));
    }
    let mut arrays = BTreeMap::new();
    arrays.insert("triplets".to_string(), write_array(dir, "triplets", &flat)?);
    arrays.insert(
        "samples".to_string(),
        write_array(dir, "samples", state.samples.matrix())?,
    );
    arrays.insert(
        "stress".to_string(),
        write_array(dir, "stress", state.stress_history.as_flat())?,
    );
    let manifest = StateManifest {
        format_version: FORMAT_VERSION,
        kind: "state".into(),
        n_terms: state.triplets.len(),
        n_dofs,
        n_elements: he,
        grid: state.grid.clone(),
        samples: SamplesMeta {
            n_samples: n_s,
            specs: state.samples.specs.clone(),
            seed: state.samples.seed,
        },
        eps_u_log: state.eps_u_log.clone(),
        stats: state.stats.clone(),
        global_solves: state.global_solves,
        stop_reason: state.stop_reason,
        config_snapshot: state.config_snapshot.clone(),
        arrays,
    };
    write_manifest(dir, &manifest)
}

/// Load a solver state saved by [`save_state`], verifying digests and shapes.
pub fn load_state(dir: &Path) -> Result<LatinState> {
    let m: StateManifest = read_manifest(dir, "state")?;
    let n_s = m.samples.n_samples;
    let n_t = m.grid.n_steps();
    let per_term = n_s + n_t + m.n_dofs;
    let entry = |name: &str| -> Result<&ArrayEntry> {
        m.arrays
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("manifest lists no {name:?} array")))
    };
    let flat = read_array(dir, "triplets", entry("triplets")?)?;
    if flat.len() != m.n_terms * per_term {
        return Err(Error::Integrity(format!(
            "triplets array holds {} floats, expected {} terms x {}",
            flat.len(),
            m.n_terms,
            per_term
        )));
    }
    let mut triplets = Vec::with_capacity(m.n_terms);
    for chunk in flat.chunks_exact(per_term) {
        triplets.push(Triplet {
            coeffs: chunk[..n_s].to_vec(),
            profile: chunk[n_s..n_s + n_t].to_vec(),
            shape: chunk[n_s + n_t..].to_vec(),
        });
    }
    let sample_matrix = read_array(dir, "samples", entry("samples")?)?;
    let samples = SampleSet::from_matrix(sample_matrix, n_s, m.samples.specs, m.samples.seed)
        .map_err(|e| Error::Integrity(format!("sample matrix does not load: {e}")))?;
    let stress = read_array(dir, "stress", entry("stress")?)?;
    let stress_history = StressHistory::from_flat(stress, n_s, m.n_elements, n_t)
        .map_err(|e| Error::Integrity(format!("stress history does not load: {e}")))?;
    if m.eps_u_log.len() != m.n_terms || m.stats.len() != m.n_terms {
        return Err(Error::Integrity(
            "per-term logs out of sync with the term count".into(),
        ));
    }
    Ok(LatinState {
        triplets,
        samples,
        grid: m.grid,
        eps_u_log: m.eps_u_log,
        stats: m.stats,
        global_solves: m.global_solves,
        stop_reason: m.stop_reason,
        stress_history,
        config_snapshot: m.config_snapshot,
    })
}

/// Persist a full-order ensemble (tracked histories + final fields).
/// Wall-clock data is deliberately not written.
pub fn save_ensemble(dir: &Path, ens: &EnsembleResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n_s = ens.n_samples();
    let n_dofs = ens.final_fields.first().map_or(0, |f| f.len());
    let mut final_flat = Vec::with_capacity(n_s * n_dofs);
    for f in &ens.final_fields {
        if f.len() != n_dofs {
            return Err(Error::DimensionMismatch(
                "final fields have inconsistent lengths".into(),
            ));
        }
        final_flat.extend_from_slice(f);
    }
    let mut arrays = BTreeMap::new();
    arrays.insert(
        "tracked".to_string(),
        write_array(dir, "tracked", ens.as_flat())?,
    );
    arrays.insert(
        "final".to_string(),
        write_array(dir, "final", &final_flat)?,
    );
    arrays.insert(
        "samples".to_string(),
        write_array(dir, "samples", ens.samples.matrix())?,
    );
    let manifest = EnsembleManifest {
        format_version: FORMAT_VERSION,
        kind: "ensemble".into(),
        n_steps: ens.n_steps(),
        n_dofs,
        tracked_dofs: ens.tracked_dofs.clone(),
        samples: SamplesMeta {
            n_samples: n_s,
            specs: ens.samples.specs.clone(),
            seed: ens.samples.seed,
        },
        converged: ens.converged.clone(),
        yielded: ens.yielded.clone(),
        total_newton_iterations: ens.total_newton_iterations,
        arrays,
    };
    write_manifest(dir, &manifest)
}

/// Load an ensemble saved by [`save_ensemble`]. Wall times come back zeroed.
pub fn load_ensemble(dir: &Path) -> Result<EnsembleResult> {
    let m: EnsembleManifest = read_manifest(dir, "ensemble")?;
    let n_s = m.samples.n_samples;
    let entry = |name: &str| -> Result<&ArrayEntry> {
        m.arrays
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("manifest lists no {name:?} array")))
    };
    let sample_matrix = read_array(dir, "samples", entry("samples")?)?;
    let samples = SampleSet::from_matrix(sample_matrix, n_s, m.samples.specs, m.samples.seed)
        .map_err(|e| Error::Integrity(format!("sample matrix does not load: {e}")))?;
    let tracked = read_array(dir, "tracked", entry("tracked")?)?;
    let final_flat = read_array(dir, "final", entry("final")?)?;
    if final_flat.len() != n_s * m.n_dofs {
        return Err(Error::Integrity(format!(
            "final fields hold {} floats, expected {} x {}",
            final_flat.len(),
            n_s,
            m.n_dofs
        )));
    }
    let final_fields: Vec<Vec<f64>> = final_flat.chunks_exact(m.n_dofs).map(<[f64]>::to_vec).collect();
    let mut ens = EnsembleResult::from_parts(
        samples,
        m.tracked_dofs,
        tracked,
        m.n_steps,
        final_fields,
        m.converged,
        m.yielded,
    )
    .map_err(|e| Error::Integrity(format!("ensemble does not assemble: {e}")))?;
    ens.total_newton_iterations = m.total_newton_iterations;
    Ok(ens)
}

/// Persist a reduced solution (coefficients + spatial basis).
pub fn save_reduced(dir: &Path, red: &ReducedSolution) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n_dofs = red.basis.first().map_or(0, |b| b.len());
    let mut basis_flat = Vec::with_capacity(red.k() * n_dofs);
    for b in &red.basis {
        if b.len() != n_dofs {
            return Err(Error::DimensionMismatch(
                "basis vectors have inconsistent lengths".into(),
            ));
        }
        basis_flat.extend_from_slice(b);
    }
    let mut arrays = BTreeMap::new();
    arrays.insert(
        "coeffs".to_string(),
        write_array(dir, "coeffs", red.as_flat())?,
    );
    arrays.insert(
        "basis".to_string(),
        write_array(dir, "basis", &basis_flat)?,
    );
    let manifest = ReducedManifest {
        format_version: FORMAT_VERSION,
        kind: "reduced".into(),
        n_samples: red.n_samples(),
        k: red.k(),
        n_dofs,
        grid: red.grid.clone(),
        converged: red.converged.clone(),
        iterations: red.iterations.clone(),
        arrays,
    };
    write_manifest(dir, &manifest)
}

/// Load a reduced solution saved by [`save_reduced`].
pub fn load_reduced(dir: &Path) -> Result<ReducedSolution> {
    let m: ReducedManifest = read_manifest(dir, "reduced")?;
    let entry = |name: &str| -> Result<&ArrayEntry> {
        m.arrays
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("manifest lists no {name:?} array")))
    };
    let coeffs = read_array(dir, "coeffs", entry("coeffs")?)?;
    let basis_flat = read_array(dir, "basis", entry("basis")?)?;
    if basis_flat.len() != m.k * m.n_dofs {
        return Err(Error::Integrity(format!(
            "basis holds {} floats, expected {} x {}",
            basis_flat.len(),
            m.k,
            m.n_dofs
        )));
    }
    let basis: Vec<Vec<f64>> = basis_flat.chunks_exact(m.n_dofs).map(<[f64]>::to_vec).collect();
    ReducedSolution::from_parts(
        coeffs,
        m.n_samples,
        m.grid.n_steps(),
        m.k,
        basis,
        m.grid,
        m.converged,
        m.iterations,
    )
    .map_err(|e| Error::Integrity(format!("reduced solution does not assemble: {e}")))
}
