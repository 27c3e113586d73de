//! Dataset loading, synthetic generation, and artifact persistence.
//!
//! Three tab-separated edge files (`user_bundle.tsv`, `user_item.tsv`,
//! `bundle_item.tsv`) are the canonical interchange format: each line is
//! `<id>\t<id>` with decimal integers. Original ids may be sparse; loading
//! re-indexes them to dense `0..count-1` ranges and keeps the id-map so
//! exports reproduce the original ids.
//!
//! Checkpoints use the `BNET1` container: a short ASCII key-value header
//! followed by named little-endian f64 tensors in canonical parameter order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::EvalSplit;
use crate::graph::{build_graph, GraphError, GraphWarnings, TripartiteGraph};
use crate::model::{ModelConfig, ModelError, ModelParams, Variant};
use crate::numcore::DenseMatrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("graph error: {0}")]
    Graph(#[from] GraphError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where a dataset came from; recorded so reports can label their inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    SteamFormat,
    Synthetic,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::SteamFormat => "steam-format",
            Provenance::Synthetic => "synthetic",
        }
    }
}

/// A parsed interaction dataset with dense internal ids.
///
/// The `*_ids` vectors map internal id -> original file id; loading built
/// them as a bijection, so exporting through them reproduces the input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetBundle {
    pub n_users: usize,
    pub n_items: usize,
    pub n_bundles: usize,
    pub edges_ub: Vec<(u32, u32)>,
    pub edges_ui: Vec<(u32, u32)>,
    pub edges_bi: Vec<(u32, u32)>,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub bundle_ids: Vec<u64>,
    pub provenance: Provenance,
}

impl DatasetBundle {
    pub fn to_graph(&self) -> Result<(TripartiteGraph, GraphWarnings), GraphError> {
        build_graph(
            self.n_users,
            self.n_items,
            self.n_bundles,
            &self.edges_ub,
            &self.edges_ui,
            &self.edges_bi,
        )
    }

    /// Summary statistics in the usual dataset-table layout.
    pub fn stats_table(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 8] = [
            ("Dataset", self.provenance.as_str().to_string()),
            ("#Users", self.n_users.to_string()),
            ("#Bundles", self.n_bundles.to_string()),
            ("#Items", self.n_items.to_string()),
            ("#User-Bundle", self.edges_ub.len().to_string()),
            ("#User-Item", self.edges_ui.len().to_string()),
            ("#Bundle-Item", self.edges_bi.len().to_string()),
            (
                "U-B Density",
                density_percent(self.edges_ub.len(), self.n_users, self.n_bundles),
            ),
        ];
        for (k, v) in rows {
            writeln!(s, "{k:<14} {v}").unwrap();
        }
        s
    }

    /// Write the three TSV files into `dir` using the original ids.
    pub fn write_tsv(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let dump = |name: &str, edges: &[(u32, u32)], a: &[u64], b: &[u64]| {
            // Canonical order by original ids, so save -> load -> save is
            // byte-identical even though loading re-indexes.
            let mut pairs: Vec<(u64, u64)> = edges
                .iter()
                .map(|&(x, y)| (a[x as usize], b[y as usize]))
                .collect();
            pairs.sort_unstable();
            let mut out = String::new();
            for (x, y) in pairs {
                writeln!(out, "{x}\t{y}").unwrap();
            }
            let path = dir.join(name);
            fs::write(&path, out).map_err(|e| io_err(&path, e))
        };
        dump("user_bundle.tsv", &self.edges_ub, &self.user_ids, &self.bundle_ids)?;
        dump("user_item.tsv", &self.edges_ui, &self.user_ids, &self.item_ids)?;
        dump("bundle_item.tsv", &self.edges_bi, &self.bundle_ids, &self.item_ids)?;
        Ok(())
    }
}

/// Edge density as a percentage with two decimals, e.g. "0.48%".
pub fn density_percent(edges: usize, rows: usize, cols: usize) -> String {
    if rows == 0 || cols == 0 {
        return "0.00%".into();
    }
    format!("{:.2}%", 100.0 * edges as f64 / (rows as f64 * cols as f64))
}

#[derive(Default)]
struct IdIndex {
    map: BTreeMap<u64, u32>,
    ids: Vec<u64>,
}

impl IdIndex {
    fn intern(&mut self, original: u64) -> u32 {
        match self.map.get(&original) {
            Some(&i) => i,
            None => {
                let i = self.ids.len() as u32;
                self.map.insert(original, i);
                self.ids.push(original);
                i
            }
        }
    }
}

fn parse_pairs(path: &Path, warnings: &mut Vec<String>) -> Result<Vec<(u64, u64)>, DataError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let err = |message: String| DataError::Parse {
            file: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| err("expected two tab-separated fields".into()))?;
        let a = a
            .trim()
            .parse::<u64>()
            .map_err(|e| err(format!("bad id {a:?}: {e}")))?;
        let b = b
            .trim()
            .parse::<u64>()
            .map_err(|e| err(format!("bad id {b:?}: {e}")))?;
        pairs.push((a, b));
    }
    if pairs.is_empty() {
        warnings.push(format!("{}: empty relation", path.display()));
    }
    Ok(pairs)
}

/// Load the three interaction files, deduplicate, and re-index to dense ids.
///
/// Returns the dataset and any non-fatal warnings (empty relations, bundles
/// referenced by users without constituent items).
pub fn load_triples(
    ub_path: &Path,
    ui_path: &Path,
    bi_path: &Path,
) -> Result<(DatasetBundle, Vec<String>), DataError> {
    let mut warnings = Vec::new();
    let raw_ub = parse_pairs(ub_path, &mut warnings)?;
    let raw_ui = parse_pairs(ui_path, &mut warnings)?;
    let raw_bi = parse_pairs(bi_path, &mut warnings)?;

    let mut users = IdIndex::default();
    let mut items = IdIndex::default();
    let mut bundles = IdIndex::default();
    let mut ub = BTreeSet::new();
    let mut ui = BTreeSet::new();
    let mut bi = BTreeSet::new();
    for (u, b) in raw_ub {
        ub.insert((users.intern(u), bundles.intern(b)));
    }
    for (u, i) in raw_ui {
        ui.insert((users.intern(u), items.intern(i)));
    }
    for (b, i) in raw_bi {
        bi.insert((bundles.intern(b), items.intern(i)));
    }

    let with_items: BTreeSet<u32> = bi.iter().map(|&(b, _)| b).collect();
    for &(_, b) in &ub {
        if !with_items.contains(&b) {
            warnings.push(format!(
                "bundle {} has user interactions but no bundle-item edges",
                bundles.ids[b as usize]
            ));
        }
    }

    Ok((
        DatasetBundle {
            n_users: users.ids.len(),
            n_items: items.ids.len(),
            n_bundles: bundles.ids.len(),
            edges_ub: ub.into_iter().collect(),
            edges_ui: ui.into_iter().collect(),
            edges_bi: bi.into_iter().collect(),
            user_ids: users.ids,
            item_ids: items.ids,
            bundle_ids: bundles.ids,
            provenance: Provenance::SteamFormat,
        },
        warnings,
    ))
}

/// Load a directory containing the three canonically named TSV files.
pub fn load_dir(dir: &Path) -> Result<(DatasetBundle, Vec<String>), DataError> {
    load_triples(
        &dir.join("user_bundle.tsv"),
        &dir.join("user_item.tsv"),
        &dir.join("bundle_item.tsv"),
    )
}

/// Parameters for the planted-preference synthetic generator.
///
/// Items and bundles are partitioned into `n_themes` clusters; each user
/// strongly prefers one theme. Interactions target the preferred theme
/// except with probability `noise_rate`, where they are uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_bundles: usize,
    pub bundle_size_min: usize,
    pub bundle_size_max: usize,
    /// Latent preference dimension: number of item/bundle themes.
    pub n_themes: usize,
    /// Target user-item interactions as a fraction of the item count.
    pub ui_rate: f64,
    /// Target user-bundle interactions as a fraction of the bundle count.
    pub ub_rate: f64,
    /// Probability an interaction ignores the user's latent preference.
    pub noise_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.n_users == 0 || self.n_items == 0 || self.n_bundles == 0 {
            return err("entity counts must be >= 1".into());
        }
        if self.n_themes == 0 || self.n_themes > self.n_items || self.n_themes > self.n_bundles {
            return err(format!(
                "n_themes must be in 1..=min(n_items, n_bundles), got {}",
                self.n_themes
            ));
        }
        if self.bundle_size_min == 0 || self.bundle_size_min > self.bundle_size_max {
            return err(format!(
                "bad bundle size range [{}, {}]",
                self.bundle_size_min, self.bundle_size_max
            ));
        }
        // Bundles draw from a single theme, so the smallest theme bounds the size.
        let smallest_theme = self.n_items / self.n_themes;
        if self.bundle_size_max > smallest_theme {
            return err(format!(
                "bundle size {} exceeds the {} items available per theme",
                self.bundle_size_max, smallest_theme
            ));
        }
        for (name, r) in [("ui_rate", self.ui_rate), ("ub_rate", self.ub_rate)] {
            if !(r > 0.0 && r <= 1.0) {
                return err(format!("{name} must be in (0, 1], got {r}"));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return err(format!("noise_rate must be in [0, 1], got {}", self.noise_rate));
        }
        Ok(())
    }
}

/// Generate a seeded planted-preference dataset. Pure in `spec` (including
/// the seed): identical specs yield identical datasets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t = spec.n_themes;
    let theme_items: Vec<Vec<u32>> = (0..t)
        .map(|th| {
            (0..spec.n_items)
                .filter(|i| i % t == th)
                .map(|i| i as u32)
                .collect()
        })
        .collect();
    let theme_bundles: Vec<Vec<u32>> = (0..t)
        .map(|th| {
            (0..spec.n_bundles)
                .filter(|b| b % t == th)
                .map(|b| b as u32)
                .collect()
        })
        .collect();

    // Bundles: size drawn from the configured range, items within the theme.
    let mut bi = BTreeSet::new();
    for b in 0..spec.n_bundles {
        let pool = &theme_items[b % t];
        let size = rng.gen_range(spec.bundle_size_min..=spec.bundle_size_max);
        let mut chosen: Vec<u32> = pool.choose_multiple(&mut rng, size).copied().collect();
        chosen.sort_unstable();
        for i in chosen {
            bi.insert((b as u32, i));
        }
    }

    // Users: one strongly preferred theme, interactions mostly within it.
    let k_ui = ((spec.ui_rate * spec.n_items as f64).round() as usize).max(1);
    let k_ub = ((spec.ub_rate * spec.n_bundles as f64).round() as usize).max(1);
    let mut ui = BTreeSet::new();
    let mut ub = BTreeSet::new();
    for u in 0..spec.n_users as u32 {
        let t1 = rng.gen_range(0..t);
        let draw = |rng: &mut ChaCha8Rng, pools: &[Vec<u32>], n: usize| -> u32 {
            if rng.gen_bool(spec.noise_rate) {
                rng.gen_range(0..n) as u32
            } else {
                let pool = &pools[t1];
                pool[rng.gen_range(0..pool.len())]
            }
        };
        for _ in 0..k_ui {
            let i = draw(&mut rng, &theme_items, spec.n_items);
            ui.insert((u, i));
        }
        for _ in 0..k_ub {
            let b = draw(&mut rng, &theme_bundles, spec.n_bundles);
            ub.insert((u, b));
        }
    }

    Ok(DatasetBundle {
        n_users: spec.n_users,
        n_items: spec.n_items,
        n_bundles: spec.n_bundles,
        edges_ub: ub.into_iter().collect(),
        edges_ui: ui.into_iter().collect(),
        edges_bi: bi.into_iter().collect(),
        user_ids: (0..spec.n_users as u64).collect(),
        item_ids: (0..spec.n_items as u64).collect(),
        bundle_ids: (0..spec.n_bundles as u64).collect(),
        provenance: Provenance::Synthetic,
    })
}

pub const CHECKPOINT_MAGIC: &str = "BNET1";

/// Serialize parameters into the BNET1 container.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::new();
    let refs = params.param_refs();
    let header = format!(
        "{CHECKPOINT_MAGIC}\nvariant={}\nembed_dim={}\nlayer_count={}\nhidden_dim={}\n\
         head_hidden_dim={}\nhead_out_dim={}\ndropout={:?}\nn_users={}\nn_items={}\n\
         n_bundles={}\ntensors={}\n\n",
        c.variant.as_str(),
        c.embed_dim,
        c.layer_count,
        c.hidden_dim,
        c.head_hidden_dim,
        c.head_out_dim,
        c.dropout,
        params.n_users,
        params.n_items,
        params.n_bundles,
        refs.len(),
    );
    out.extend_from_slice(header.as_bytes());
    for r in refs {
        let (rows, cols) = r.matrix.shape();
        out.extend_from_slice(format!("{} {rows} {cols}\n", r.name).as_bytes());
        for v in r.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), DataError> {
    fs::write(path, checkpoint_bytes(params)).map_err(|e| io_err(path, e))
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn line(&mut self) -> Result<&'a str, DataError> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DataError::Format("truncated checkpoint: missing newline".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| DataError::Format("non-UTF-8 checkpoint header".into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Format(format!(
                "truncated checkpoint: wanted {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Parse a BNET1 checkpoint back into model parameters.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelParams, DataError> {
    let mut cur = ByteCursor { bytes, pos: 0 };
    let magic = cur.line()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DataError::Format(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let mut fields = BTreeMap::new();
    loop {
        let line = cur.line()?;
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::Format(format!("bad header line {line:?}")))?;
        if fields.insert(k.to_string(), v.to_string()).is_some() {
            return Err(DataError::Format(format!("duplicate header key {k:?}")));
        }
    }
    let field = |k: &str| -> Result<&str, DataError> {
        fields
            .get(k)
            .map(|s| s.as_str())
            .ok_or_else(|| DataError::Format(format!("missing header key {k:?}")))
    };
    let number = |k: &str| -> Result<usize, DataError> {
        field(k)?
            .parse()
            .map_err(|e| DataError::Format(format!("bad {k}: {e}")))
    };
    let config = ModelConfig {
        variant: Variant::parse(field("variant")?)
            .map_err(|e| DataError::Format(e.to_string()))?,
        embed_dim: number("embed_dim")?,
        layer_count: number("layer_count")?,
        hidden_dim: number("hidden_dim")?,
        head_hidden_dim: number("head_hidden_dim")?,
        head_out_dim: number("head_out_dim")?,
        dropout: field("dropout")?
            .parse()
            .map_err(|e| DataError::Format(format!("bad dropout: {e}")))?,
    };
    let (n_users, n_items, n_bundles) =
        (number("n_users")?, number("n_items")?, number("n_bundles")?);
    let tensor_count = number("tensors")?;
    let known = [
        "variant",
        "embed_dim",
        "layer_count",
        "hidden_dim",
        "head_hidden_dim",
        "head_out_dim",
        "dropout",
        "n_users",
        "n_items",
        "n_bundles",
        "tensors",
    ];
    for k in fields.keys() {
        if !known.contains(&k.as_str()) {
            return Err(DataError::Format(format!("unknown header key {k:?}")));
        }
    }

    let mut params = ModelParams::init(&config, n_users, n_items, n_bundles, 0)?;
    let expected: Vec<(String, (usize, usize))> = params
        .param_refs()
        .iter()
        .map(|r| (r.name.clone(), r.matrix.shape()))
        .collect();
    if tensor_count != expected.len() {
        return Err(DataError::Format(format!(
            "checkpoint declares {tensor_count} tensors, model has {}",
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(expected.len());
    for (name, (rows, cols)) in &expected {
        let line = cur.line()?;
        let mut parts = line.split(' ');
        let got_name = parts.next().unwrap_or("");
        let got_rows: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Format(format!("bad tensor line {line:?}")))?;
        let got_cols: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Format(format!("bad tensor line {line:?}")))?;
        if got_name != name || got_rows != *rows || got_cols != *cols {
            return Err(DataError::Format(format!(
                "tensor mismatch: got {got_name} {got_rows}x{got_cols}, \
                 expected {name} {rows}x{cols}"
            )));
        }
        let raw = cur.take(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        flat.push(
            DenseMatrix::from_vec(*rows, *cols, values)
                .map_err(|e| DataError::Format(format!("tensor {name}: {e}")))?,
        );
    }
    if cur.pos != bytes.len() {
        return Err(DataError::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - cur.pos
        )));
    }
    params.set_from_flat(&flat)?;
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, DataError> {
    parse_checkpoint(&fs::read(path).map_err(|e| io_err(path, e))?)
}

pub fn save_split(split: &EvalSplit, path: &Path) -> Result<(), DataError> {
    let mut bytes = serde_json::to_vec_pretty(split)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn load_split(path: &Path) -> Result<EvalSplit, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{fit, fit_resume, TrainConfig};
    use std::collections::HashSet;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_users: 40,
            n_items: 30,
            n_bundles: 12,
            bundle_size_min: 2,
            bundle_size_max: 4,
            n_themes: 3,
            ui_rate: 0.2,
            ub_rate: 0.25,
            noise_rate: 0.1,
            seed,
        }
    }

    mod loading {
        use super::*;

        #[test]
        fn dedups_and_reindexes_sparse_ids() {
            let dir = tempfile::tempdir().unwrap();
            let p = |name: &str, body: &str| {
                let path = dir.path().join(name);
                fs::write(&path, body).unwrap();
                path
            };
            let ub = p("user_bundle.tsv", "10\t900\n10\t900\n77\t901\n");
            let ui = p("user_item.tsv", "10\t5\n77\t6\n");
            let bi = p("bundle_item.tsv", "900\t5\n900\t6\n901\t6\n");
            let (d, warnings) = load_triples(&ub, &ui, &bi).unwrap();
            assert!(warnings.is_empty(), "{warnings:?}");
            assert_eq!((d.n_users, d.n_items, d.n_bundles), (2, 2, 2));
            assert_eq!(d.edges_ub.len(), 2, "duplicate line collapsed");
            assert_eq!(d.user_ids, vec![10, 77]);
            assert_eq!(d.bundle_ids, vec![900, 901]);
        }

        #[test]
        fn roundtrip_through_id_map_is_identity() {
            let d = generate_synthetic(&small_spec(5)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            d.write_tsv(dir.path()).unwrap();
            let (loaded, _) = load_dir(dir.path()).unwrap();
            let dir2 = tempfile::tempdir().unwrap();
            loaded.write_tsv(dir2.path()).unwrap();
            for name in ["user_bundle.tsv", "user_item.tsv", "bundle_item.tsv"] {
                assert_eq!(
                    fs::read(dir.path().join(name)).unwrap(),
                    fs::read(dir2.path().join(name)).unwrap(),
                    "{name} unchanged by load/save roundtrip"
                );
            }
        }

        #[test]
        fn malformed_line_reports_file_and_line() {
            let dir = tempfile::tempdir().unwrap();
            let ub = dir.path().join("user_bundle.tsv");
            fs::write(&ub, "1\t2\nnot-a-pair\n").unwrap();
            let ui = dir.path().join("user_item.tsv");
            fs::write(&ui, "").unwrap();
            let bi = dir.path().join("bundle_item.tsv");
            fs::write(&bi, "2\t3\n").unwrap();
            let err = load_triples(&ub, &ui, &bi).unwrap_err().to_string();
            assert!(err.contains("user_bundle.tsv:2"), "{err}");
        }

        #[test]
        fn empty_relation_warns() {
            let dir = tempfile::tempdir().unwrap();
            let ub = dir.path().join("user_bundle.tsv");
            fs::write(&ub, "1\t2\n").unwrap();
            let ui = dir.path().join("user_item.tsv");
            fs::write(&ui, "").unwrap();
            let bi = dir.path().join("bundle_item.tsv");
            fs::write(&bi, "2\t3\n").unwrap();
            let (d, warnings) = load_triples(&ub, &ui, &bi).unwrap();
            assert!(d.edges_ui.is_empty());
            assert!(warnings.iter().any(|w| w.contains("user_item.tsv")));
        }

        #[test]
        fn itemless_bundle_warns() {
            let dir = tempfile::tempdir().unwrap();
            let ub = dir.path().join("user_bundle.tsv");
            fs::write(&ub, "1\t2\n1\t3\n").unwrap();
            let ui = dir.path().join("user_item.tsv");
            fs::write(&ui, "1\t9\n").unwrap();
            let bi = dir.path().join("bundle_item.tsv");
            fs::write(&bi, "2\t9\n").unwrap();
            let (_, warnings) = load_triples(&ub, &ui, &bi).unwrap();
            assert!(
                warnings.iter().any(|w| w.contains("bundle 3")),
                "{warnings:?}"
            );
        }

        #[test]
        fn published_steam_density_rounds_to_table_value() {
            assert_eq!(density_percent(87_565, 29_634, 615), "0.48%");
        }

        #[test]
        fn stats_match_brute_force_recount() {
            let d = generate_synthetic(&small_spec(11)).unwrap();
            let users: HashSet<u32> = d.edges_ub.iter().map(|&(u, _)| u).collect();
            assert!(users.len() <= d.n_users);
            let table = d.stats_table();
            assert!(table.contains(&format!("#User-Bundle   {}", d.edges_ub.len())));
            assert!(table.contains(&format!("#User-Item     {}", d.edges_ui.len())));
            assert!(table.contains(&format!("#Bundle-Item   {}", d.edges_bi.len())));
            let dens = density_percent(d.edges_ub.len(), d.n_users, d.n_bundles);
            assert!(table.contains(&dens));
        }
    }

    mod synthetic {
        use super::*;

        #[test]
        fn deterministic_in_seed() {
            let a = generate_synthetic(&small_spec(3)).unwrap();
            let b = generate_synthetic(&small_spec(3)).unwrap();
            assert_eq!(a, b);
            let c = generate_synthetic(&small_spec(4)).unwrap();
            assert_ne!(a, c);
        }

        #[test]
        fn fixed_size_range_yields_exact_bundle_sizes() {
            let mut spec = small_spec(7);
            spec.bundle_size_min = 2;
            spec.bundle_size_max = 2;
            let d = generate_synthetic(&spec).unwrap();
            let mut sizes = vec![0usize; d.n_bundles];
            for &(b, _) in &d.edges_bi {
                sizes[b as usize] += 1;
            }
            assert!(sizes.iter().all(|&s| s == 2), "{sizes:?}");
        }

        #[test]
        fn infeasible_bundle_size_is_config_error() {
            let mut spec = small_spec(0);
            spec.bundle_size_max = spec.n_items + 1;
            spec.bundle_size_min = spec.bundle_size_max;
            assert!(matches!(
                generate_synthetic(&spec),
                Err(DataError::Config(_))
            ));
        }

        #[test]
        fn rates_outside_unit_interval_rejected() {
            let mut spec = small_spec(0);
            spec.ub_rate = 0.0;
            assert!(matches!(
                generate_synthetic(&spec),
                Err(DataError::Config(_))
            ));
            let mut spec = small_spec(0);
            spec.noise_rate = 1.5;
            assert!(matches!(
                generate_synthetic(&spec),
                Err(DataError::Config(_))
            ));
        }

        #[test]
        fn every_user_has_a_bundle_interaction() {
            let d = generate_synthetic(&small_spec(9)).unwrap();
            let users: HashSet<u32> = d.edges_ub.iter().map(|&(u, _)| u).collect();
            assert_eq!(users.len(), d.n_users);
        }
    }

    mod persistence {
        use super::*;
        use crate::model::ModelConfig;

        fn tiny_params(variant: Variant) -> ModelParams {
            let config = ModelConfig {
                variant,
                embed_dim: 3,
                layer_count: 2,
                hidden_dim: 4,
                head_hidden_dim: 5,
                head_out_dim: 2,
                dropout: 0.1,
            };
            ModelParams::init(&config, 4, 3, 2, 99).unwrap()
        }

        #[test]
        fn checkpoint_roundtrip_is_bit_exact() {
            for variant in [
                Variant::BundleNet,
                Variant::GcnTri,
                Variant::GcnBi,
                Variant::BprMf,
            ] {
                let params = tiny_params(variant);
                let bytes = checkpoint_bytes(&params);
                let loaded = parse_checkpoint(&bytes).unwrap();
                assert_eq!(checkpoint_bytes(&loaded), bytes, "{variant:?}");
                for (a, b) in params.param_refs().iter().zip(loaded.param_refs()) {
                    assert_eq!(a.name, b.name);
                    assert_eq!(a.matrix.data(), b.matrix.data());
                }
            }
        }

        #[test]
        fn truncated_checkpoint_is_clean_format_error() {
            let bytes = checkpoint_bytes(&tiny_params(Variant::BundleNet));
            for cut in [3, 40, bytes.len() - 1] {
                assert!(matches!(
                    parse_checkpoint(&bytes[..cut]),
                    Err(DataError::Format(_))
                ));
            }
        }

        #[test]
        fn bad_magic_rejected() {
            let mut bytes = checkpoint_bytes(&tiny_params(Variant::GcnBi));
            bytes[0] = b'X';
            let err = parse_checkpoint(&bytes).unwrap_err().to_string();
            assert!(err.contains("magic"), "{err}");
        }

        #[test]
        fn trailing_garbage_rejected() {
            let mut bytes = checkpoint_bytes(&tiny_params(Variant::BprMf));
            bytes.extend_from_slice(b"extra");
            assert!(matches!(
                parse_checkpoint(&bytes),
                Err(DataError::Format(_))
            ));
        }

        #[test]
        fn split_roundtrip() {
            let split = EvalSplit {
                heldout: vec![crate::eval::HeldOut {
                    user: 1,
                    bundle: 2,
                    negatives: vec![0, 3],
                    shortfall: true,
                    only_interaction: false,
                }],
                negatives_per_user: 2,
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("split.json");
            save_split(&split, &path).unwrap();
            assert_eq!(load_split(&path).unwrap(), split);
        }

        #[test]
        fn resume_continues_prior_loss_trajectory() {
            let d = generate_synthetic(&small_spec(21)).unwrap();
            let (g, _) = d.to_graph().unwrap();
            let model_config = ModelConfig {
                variant: Variant::GcnBi,
                embed_dim: 4,
                layer_count: 2,
                hidden_dim: 4,
                head_hidden_dim: 6,
                head_out_dim: 2,
                dropout: 0.0,
            };
            let config = TrainConfig {
                max_epochs: 8,
                schedule: crate::training::Schedule::BundleOnly,
                seed: 17,
                ..TrainConfig::default()
            };
            let (params, report) = fit(&g, &model_config, &config, None).unwrap();
            let fresh_first = report.epochs.first().unwrap().loss;
            let prior_last = report.epochs.last().unwrap().loss;

            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.bnet");
            save_checkpoint(&params, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            let resume_config = TrainConfig {
                max_epochs: 1,
                ..config.clone()
            };
            let (_, resumed) = fit_resume(&g, loaded, &resume_config, None).unwrap();
            let resumed_loss = resumed.epochs.first().unwrap().loss;
            assert!(
                resumed_loss < fresh_first,
                "resumed loss {resumed_loss} should continue below the fresh \
                 starting loss {fresh_first} (prior run ended at {prior_last})"
            );
        }
    }
}
