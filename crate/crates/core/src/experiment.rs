//! Gradient certification and ablation grids built on the training loop.

use serde::{Deserialize, Serialize};

use crate::data::{SceneExample, Vocabulary, BOS, EOS, FEAT_DIM};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, GsaVariant};
use crate::gradcheck::{finite_diff_param, relative_error, DEFAULT_STEP};
use crate::model::{EncoderVariant, Model, ModelConfig};
use crate::parallel::{self, Execution};
use crate::param::RngState;
use crate::tensor::Tensor;
use crate::train::{evaluate, train, Metrics, TrainConfig};

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Width 32, two heads, two layers, no dropout.
pub fn gradcheck_config(variant: EncoderVariant, gsa: GsaVariant) -> ModelConfig {
    let mut cfg = ModelConfig::toy(32, 2, 64, 2).with_variant(variant, gsa);
    cfg.attention.d_g = 8;
    cfg.attention.dropout_p = 0.0;
    cfg.feat_dim = FEAT_DIM;
    cfg
}

/// Random scenes of `objects` boxes with captions of `tokens` ids (BOS and
/// EOS included).
pub fn random_batch(seed: u64, count: usize, objects: usize, tokens: usize, vocab: usize, feat_dim: usize) -> Vec<SceneExample> {
    let mut rng = RngState::new(seed);
    (0..count)
        .map(|_| {
            let features = Tensor::new(
                vec![objects, feat_dim],
                (0..objects * feat_dim).map(|_| rng.normal()).collect(),
            )
            .unwrap();
            let boxes = (0..objects)
                .map(|_| BoundingBox {
                    x: rng.uniform(0.1, 0.9),
                    y: rng.uniform(0.1, 0.9),
                    w: rng.uniform(0.05, 0.4),
                    h: rng.uniform(0.05, 0.4),
                })
                .collect();
            let mut caption = vec![BOS];
            caption.extend((0..tokens - 2).map(|_| 3 + rng.below(vocab - 3)));
            caption.push(EOS);
            SceneExample { features, boxes, caption }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub scalars: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub label: String,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of the mean token loss with central
/// differences for every named parameter. Two scenes of four objects,
/// decoder inputs of five tokens.
pub fn run_gradcheck(cfg: &ModelConfig, seed: u64, corrupt: bool, exec: Execution) -> Result<GradcheckReport> {
    if cfg.attention.dropout_p != 0.0 {
        return Err(Error::Config("gradient checks need dropout_p = 0".into()));
    }
    let mut model = Model::new(cfg.clone(), seed)?;
    model.net.corrupt_backward(corrupt);
    let batch = random_batch(seed ^ 0x5eed, 2, 4, 6, cfg.vocab_size, cfg.feat_dim);
    let refs: Vec<&SceneExample> = batch.iter().collect();
    let (_, grads) = model.net.loss_and_grads(&model.params, &refs, None, exec)?;
    let net = &model.net;
    let store = &model.params;
    let ids: Vec<_> = store.ids().collect();
    let per = parallel::try_map(exec, &ids, |_, &id| -> Result<GradcheckEntry> {
        let mut local = store.clone();
        let numeric = finite_diff_param(
            &mut local,
            id,
            |s| net.batch_loss(s, &refs, Execution::Sequential).map(|l| l.mean()),
            DEFAULT_STEP,
        )?;
        let analytic = Tensor::from_parts(numeric.shape().to_vec(), grads.get(id).to_vec());
        let rel = relative_error(analytic.data(), numeric.data());
        Ok(GradcheckEntry {
            name: local.param(id).name.clone(),
            scalars: numeric.len(),
            analytic_norm: analytic.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
            rel_error: rel,
            passed: rel < GRADCHECK_TOLERANCE,
        })
    })?;
    let label = if cfg.encoder_variant.geometric() {
        format!("{}({})", cfg.encoder_variant.name(), cfg.gsa_variant.short())
    } else {
        cfg.encoder_variant.name().to_string()
    };
    Ok(GradcheckReport {
        label,
        tolerance: GRADCHECK_TOLERANCE,
        entries: per,
    })
}

/// One encoder setting of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: EncoderVariant,
    pub gsa: GsaVariant,
}

impl Cell {
    pub fn label(&self) -> String {
        if self.variant.geometric() {
            format!("{}({})", self.variant.name(), self.gsa.short())
        } else {
            self.variant.name().to_string()
        }
    }
}

/// Parses `sa,nsa,gsa:ci,ng:kd`; a geometric variant without a suffix uses
/// the query-dependent bias.
pub fn parse_matrix(spec: &str) -> Result<Vec<Cell>> {
    let cells = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (v, g) = item.split_once(':').unwrap_or((item, "qd"));
            let variant: EncoderVariant = v.parse()?;
            if !variant.geometric() && item.contains(':') {
                return Err(Error::Config(format!("`{item}`: only gsa and ng take a bias variant")));
            }
            Ok(Cell {
                variant,
                gsa: GsaVariant::from_short(g)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if cells.is_empty() {
        return Err(Error::Config("ablation matrix is empty".into()));
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub cell: String,
    pub seed: u64,
    pub final_train_loss: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub runs: usize,
    pub median_relation_token_accuracy: f64,
    pub median_exact_match_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == label)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Trains and evaluates every `cell × seed`. Each run is single-threaded and
/// seeded by its own seed (model init, shuffling, dropout); runs execute in
/// parallel under `exec` and are merged in grid order.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    cells: &[Cell],
    seeds: &[u64],
    train_set: &[SceneExample],
    test_set: &[SceneExample],
    vocab: &Vocabulary,
    exec: Execution,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let jobs: Vec<(Cell, u64)> = cells.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    let runs = parallel::try_map(exec, &jobs, |_, &(cell, seed)| -> Result<AblationRun> {
        let cfg = base.clone().with_variant(cell.variant, cell.gsa);
        let mut model = Model::new(cfg, seed)?;
        let tc = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let history = train(&mut model, train_set, &tc, Execution::Sequential, |_| {})?;
        let metrics = evaluate(&model, test_set, vocab, 1, Execution::Sequential)?;
        Ok(AblationRun {
            cell: cell.label(),
            seed,
            final_train_loss: history.last().map_or(f64::NAN, |h| h.mean_loss),
            metrics,
        })
    })?;
    let rows = cells
        .iter()
        .map(|c| {
            let label = c.label();
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.cell == label).collect();
            let mut rel: Vec<f64> = mine.iter().map(|r| r.metrics.relation_token_accuracy).collect();
            let mut em: Vec<f64> = mine.iter().map(|r| r.metrics.exact_match_rate).collect();
            AblationRow {
                cell: label,
                runs: mine.len(),
                median_relation_token_accuracy: median(&mut rel),
                median_exact_match_rate: median(&mut em),
            }
        })
        .collect();
    Ok(AblationTable { rows, runs })
}
