//! The assembled regressor: encoder, Hebbian storage, direction attention,
//! dropout and the position / rotation / grid heads, plus the weighted
//! pose loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{direction_encode, multi_head_forward, AttentionParams};
use crate::data::{Checkpoint, Config, EncoderKind, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::{grid_center, quat_log, GridSpec, UnitQuaternion, Vec3};
use crate::hebbian::{process_batch, read_frozen, HebbianMemory, ReadoutHead};
use crate::parallel;
use crate::tensor::{Graph, Matrix, Var};
use crate::train::LossRecord;

/// Checkpoint name of the stored memory matrix.
pub const MEMORY_TENSOR: &str = "memory.w";

/// Samples per graph when predicting.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
    /// Whether the optimizer applies weight decay.
    pub decay: bool,
}

struct Slot {
    name: String,
    shape: (usize, usize),
    trainable: bool,
    decay: bool,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    Quaternion,
}

fn slot(name: impl Into<String>, shape: (usize, usize), init: Init) -> Slot {
    Slot {
        name: name.into(),
        shape,
        trainable: true,
        decay: true,
        init,
    }
}

/// Parameter names, shapes and initializers implied by a configuration, in
/// checkpoint order.
fn layout(cfg: &Config) -> Vec<Slot> {
    let d = cfg.feature_dim;
    let f = cfg.bin_features;
    let dh = cfg.head_dim();
    let mut out = Vec::new();
    match cfg.encoder {
        EncoderKind::RandomProjection => out.push(Slot {
            trainable: false,
            decay: false,
            ..slot(
                "encoder.projection",
                (cfg.input_dim, d),
                Init::Normal(1.0 / (cfg.input_dim as f64).sqrt()),
            )
        }),
        EncoderKind::Mlp => {
            let mut widths = vec![cfg.input_dim];
            widths.extend(cfg.encoder_hidden.iter().copied());
            widths.push(d);
            let layers = widths.len() - 1;
            for l in 0..layers {
                let fan_in = widths[l] as f64;
                let gain = if l + 1 < layers { 2.0 } else { 1.0 };
                out.push(slot(
                    format!("encoder.{l}.weight"),
                    (widths[l], widths[l + 1]),
                    Init::Normal((gain / fan_in).sqrt()),
                ));
                out.push(slot(format!("encoder.{l}.bias"), (1, widths[l + 1]), Init::Zeros));
            }
        }
    }
    if cfg.use_hebbian {
        let eta_raw = (cfg.eta0 / (1.0 - cfg.eta0)).ln();
        out.push(Slot {
            decay: false,
            ..slot("memory.eta_raw", (1, 1), Init::Const(eta_raw))
        });
        out.push(slot("readout.weight", (d, d), Init::Normal(1.0 / (d as f64).sqrt())));
        out.push(slot("readout.bias", (1, d), Init::Zeros));
        out.push(slot("readout.ln_gain", (1, d), Init::Const(1.0)));
        out.push(slot("readout.ln_bias", (1, d), Init::Zeros));
    }
    out.push(Slot {
        decay: false,
        ..slot("direction.xi_raw", (cfg.bins, f), Init::Zeros)
    });
    let proj = Init::Normal(1.0 / (f as f64).sqrt());
    for h in 0..cfg.heads {
        out.push(slot(format!("attention.{h}.theta"), (f, dh), proj));
        out.push(slot(format!("attention.{h}.psi"), (f, dh), proj));
        out.push(slot(format!("attention.{h}.value"), (f, dh), proj));
    }
    out.push(slot(
        "attention.out",
        (cfg.heads * dh, f),
        Init::Normal(1.0 / ((cfg.heads * dh) as f64).sqrt()),
    ));
    let head = Init::Normal(1.0 / (d as f64).sqrt());
    out.push(slot("head.position.weight", (d, 3), head));
    out.push(slot("head.position.bias", (1, 3), Init::Zeros));
    out.push(slot("head.rotation.weight", (d, 4), head));
    out.push(slot("head.rotation.bias", (1, 4), Init::Quaternion));
    if cfg.use_grid {
        out.push(slot("head.grid.weight", (d, 3), head));
        out.push(slot("head.grid.bias", (1, 3), Init::Zeros));
    }
    let mut weights = vec![("loss.alpha", cfg.alpha0), ("loss.beta", cfg.beta0)];
    if cfg.use_grid {
        weights.push(("loss.gamma", cfg.gamma0));
    }
    for (name, v) in weights {
        out.push(Slot {
            decay: false,
            ..slot(name, (1, 1), Init::Const(v))
        });
    }
    out
}

/// Graph handles for one bound copy of the parameters.
#[derive(Clone, Debug)]
pub struct Handles {
    /// One entry per parameter, in [`NeuroLoc::params`] order.
    pub vars: Vec<Var>,
    encoder: Vec<(Var, Option<Var>)>,
    eta_raw: Option<Var>,
    readout: Option<ReadoutHead>,
    xi_raw: Var,
    attention: AttentionParams,
    position: (Var, Var),
    rotation: (Var, Var),
    grid: Option<(Var, Var)>,
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Option<Var>,
}

/// Raw head outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// B×3
    pub position: Var,
    /// B×4, unnormalized
    pub rotation: Var,
    /// B×3, absent when the grid head is disabled
    pub grid: Option<Var>,
}

/// Ground truth for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub position: Matrix,
    /// Log map of the canonical ground-truth quaternions, B×3.
    pub log_rotation: Matrix,
    pub grid: Option<Matrix>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    /// Batch mean of `‖p − p̄‖₁`.
    pub position: Var,
    /// Batch mean of `‖log q − log q̄‖₁`.
    pub rotation: Var,
    /// Batch mean of `‖g − ḡ‖₁`.
    pub grid: Option<Var>,
}

pub enum Mode<'a> {
    /// Memory is written in time order; dropout is active.
    Train {
        memory: &'a mut HebbianMemory,
        rng: &'a mut ChaCha8Rng,
    },
    /// Memory is read only; no dropout.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub position: Vec3,
    pub orientation: UnitQuaternion,
    pub grid: Option<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuroLoc {
    pub config: Config,
    pub params: Vec<Param>,
    pub grid: Option<GridSpec>,
    pub memory: HebbianMemory,
}

impl NeuroLoc {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &Config, grid: Option<GridSpec>) -> Result<Self> {
        config.validate()?;
        if config.use_grid && grid.is_none() {
            return Err(Error::Config("the grid head needs a grid specification".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layout(config)
            .into_iter()
            .map(|s| {
                let (r, c) = s.shape;
                let value = match s.init {
                    Init::Zeros => Matrix::zeros(r, c),
                    Init::Const(v) => Matrix::filled(r, c, v),
                    Init::Normal(std) => Matrix::random_normal(r, c, std, &mut rng),
                    Init::Quaternion => Matrix::row_vector(vec![1.0, 0.0, 0.0, 0.0]),
                };
                Param {
                    name: s.name,
                    value,
                    trainable: s.trainable,
                    decay: s.decay,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            grid,
            memory: HebbianMemory::new(config.feature_dim, config.memory_mode),
        })
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Current memory write rate `sigmoid(eta_raw)`.
    pub fn eta(&self) -> Option<f64> {
        self.param("memory.eta_raw")
            .map(|p| 1.0 / (1.0 + (-p.value.item()).exp()))
    }

    /// Records every parameter on `g`. With `grads` trainable parameters
    /// become differentiable leaves, otherwise everything is constant.
    pub fn bind(&self, g: &mut Graph, grads: bool) -> Result<Handles> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if grads && p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        self.bind_vars(vars)
    }

    /// Builds handles from already recorded variables, one per parameter.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Handles> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&vars) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("bind", v.shape(), p.value.shape()));
            }
        }
        let find = |name: &str| -> Result<Var> {
            self.params
                .iter()
                .position(|p| p.name == name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::Contract(format!("parameter `{name}` missing")))
        };
        let cfg = &self.config;
        let encoder = match cfg.encoder {
            EncoderKind::RandomProjection => vec![(find("encoder.projection")?, None)],
            EncoderKind::Mlp => (0..=cfg.encoder_hidden.len())
                .map(|l| {
                    Ok((
                        find(&format!("encoder.{l}.weight"))?,
                        Some(find(&format!("encoder.{l}.bias"))?),
                    ))
                })
                .collect::<Result<_>>()?,
        };
        let (eta_raw, readout) = if cfg.use_hebbian {
            (
                Some(find("memory.eta_raw")?),
                Some(ReadoutHead {
                    weight: find("readout.weight")?,
                    bias: find("readout.bias")?,
                    ln_gain: find("readout.ln_gain")?,
                    ln_bias: find("readout.ln_bias")?,
                }),
            )
        } else {
            (None, None)
        };
        let per_head = |what: &str| -> Result<Vec<Var>> {
            (0..cfg.heads).map(|h| find(&format!("attention.{h}.{what}"))).collect()
        };
        let attention = AttentionParams {
            theta: per_head("theta")?,
            psi: per_head("psi")?,
            value: per_head("value")?,
            out: find("attention.out")?,
        };
        let grid = if cfg.use_grid {
            Some((find("head.grid.weight")?, find("head.grid.bias")?))
        } else {
            None
        };
        Ok(Handles {
            encoder,
            eta_raw,
            readout,
            xi_raw: find("direction.xi_raw")?,
            attention,
            position: (find("head.position.weight")?, find("head.position.bias")?),
            rotation: (find("head.rotation.weight")?, find("head.rotation.bias")?),
            grid,
            alpha: find("loss.alpha")?,
            beta: find("loss.beta")?,
            gamma: if cfg.use_grid { Some(find("loss.gamma")?) } else { None },
            vars,
        })
    }

    /// Maps a B×input batch to B×D features.
    pub fn encode_graph(&self, g: &mut Graph, h: &Handles, input: Var) -> Result<Var> {
        if input.cols() != self.config.input_dim {
            return Err(Error::shape(
                "encode",
                input.shape(),
                (input.rows(), self.config.input_dim),
            ));
        }
        let mut x = input;
        let last = h.encoder.len() - 1;
        for (l, &(w, b)) in h.encoder.iter().enumerate() {
            x = g.matmul(x, w)?;
            if let Some(b) = b {
                x = g.add_row(x, b)?;
            }
            if l < last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        h: &Handles,
        input: Var,
        timestamps: &[f64],
        mode: Mode<'_>,
    ) -> Result<Outputs> {
        let x = self.encode_graph(g, h, input)?;
        let (x_pc, rng) = match mode {
            Mode::Train { memory, rng } => {
                let x_pc = match (&h.readout, h.eta_raw) {
                    (Some(head), Some(eta_raw)) => {
                        let eta = g.sigmoid(eta_raw)?;
                        process_batch(g, memory, eta, head, x, timestamps, false)?
                    }
                    _ => x,
                };
                (x_pc, Some(rng))
            }
            Mode::Eval => {
                let x_pc = match &h.readout {
                    Some(head) => read_frozen(g, &self.memory, head, x)?,
                    None => x,
                };
                (x_pc, None)
            }
        };
        let x_hd = direction_encode(g, x_pc, h.xi_raw)?;
        let mut y = multi_head_forward(g, x_hd, &h.attention, self.config.tokens())?;
        if let Some(rng) = rng {
            let p = self.config.dropout;
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let mut mask = Matrix::zeros(y.rows(), y.cols());
                for m in mask.as_mut_slice() {
                    *m = if rng.random::<f64>() < p { 0.0 } else { keep };
                }
                let mask = g.constant(mask);
                y = g.hadamard(y, mask)?;
            }
        }
        let linear = |g: &mut Graph, (w, b): (Var, Var)| -> Result<Var> {
            let z = g.matmul(y, w)?;
            g.add_row(z, b)
        };
        Ok(Outputs {
            position: linear(g, h.position)?,
            rotation: linear(g, h.rotation)?,
            grid: h.grid.map(|p| linear(g, p)).transpose()?,
        })
    }

    /// Ground truth for `samples`, with grid targets from the model's grid.
    pub fn targets(&self, samples: &[SceneSample]) -> Result<Targets> {
        let b = samples.len();
        let mut position = Matrix::zeros(b, 3);
        let mut log_rotation = Matrix::zeros(b, 3);
        for (i, s) in samples.iter().enumerate() {
            position.row_mut(i).copy_from_slice(&s.pose.position);
            log_rotation.row_mut(i).copy_from_slice(&quat_log(s.pose.orientation));
        }
        let grid = match (&self.grid, self.config.use_grid) {
            (Some(spec), true) => {
                let mut m = Matrix::zeros(b, 3);
                for (i, s) in samples.iter().enumerate() {
                    m.row_mut(i).copy_from_slice(&grid_truth(s, spec));
                }
                Some(m)
            }
            _ => None,
        };
        Ok(Targets {
            position,
            log_rotation,
            grid,
        })
    }

    fn input_matrix(&self, samples: &[&[f64]]) -> Result<Matrix> {
        let n = self.config.input_dim;
        let mut m = Matrix::zeros(samples.len(), n);
        for (i, f) in samples.iter().enumerate() {
            if f.len() != n {
                return Err(Error::shape("input features", (1, f.len()), (1, n)));
            }
            m.row_mut(i).copy_from_slice(f);
        }
        Ok(m)
    }

    /// Encoder output for each row, without gradients.
    pub fn encode(&self, samples: &[&[f64]]) -> Result<Matrix> {
        let chunks: Vec<&[&[f64]]> = samples.chunks(EVAL_CHUNK).collect();
        let parts = parallel::map(&chunks, |chunk| -> Result<Matrix> {
            let mut g = Graph::new();
            let h = self.bind(&mut g, false)?;
            let input = g.constant(self.input_matrix(chunk)?);
            let x = self.encode_graph(&mut g, &h, input)?;
            Ok(g.value(x).clone())
        });
        let d = self.config.feature_dim;
        let mut data = Vec::with_capacity(samples.len() * d);
        for p in parts {
            data.extend_from_slice(p?.as_slice());
        }
        Matrix::from_vec(samples.len(), d, data)
    }

    /// Eval-mode predictions; rows are independent of each other.
    pub fn predict(&self, samples: &[&[f64]]) -> Result<Vec<Prediction>> {
        let chunks: Vec<&[&[f64]]> = samples.chunks(EVAL_CHUNK).collect();
        let parts = parallel::map(&chunks, |chunk| self.predict_chunk(chunk));
        let mut out = Vec::with_capacity(samples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn predict_chunk(&self, chunk: &[&[f64]]) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let h = self.bind(&mut g, false)?;
        let input = g.constant(self.input_matrix(chunk)?);
        let out = self.forward(&mut g, &h, input, &[], Mode::Eval)?;
        let (p, q) = (g.value(out.position), g.value(out.rotation));
        let gr = out.grid.map(|v| g.value(v));
        (0..chunk.len())
            .map(|i| {
                let r = q.row(i);
                Ok(Prediction {
                    position: [p.get(i, 0), p.get(i, 1), p.get(i, 2)],
                    orientation: UnitQuaternion::normalize([r[0], r[1], r[2], r[3]])?,
                    grid: gr.map(|m| [m.get(i, 0), m.get(i, 1), m.get(i, 2)]),
                })
            })
            .collect()
    }

    pub fn predict_samples(&self, samples: &[SceneSample]) -> Result<Vec<Prediction>> {
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
        self.predict(&rows)
    }

    /// Clears the memory and writes `samples` into it in order, using the
    /// current parameters.
    pub fn rebuild_memory(&mut self, samples: &[SceneSample]) -> Result<()> {
        self.memory.reset();
        let Some(eta) = self.eta() else { return Ok(()) };
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
        let x = self.encode(&rows)?;
        for r in 0..x.rows() {
            self.memory.write(x.row(r), eta)?;
        }
        Ok(())
    }

    /// Input saliency `|∂(‖p‖₁ + ‖log q‖₁)/∂x|`, scaled so the largest entry is 1.
    pub fn saliency(&self, features: &[f64]) -> Result<Vec<f64>> {
        let input = self.input_matrix(&[features])?;
        saliency_map(&input, |g, x| {
            let h = self.bind(g, false)?;
            let out = self.forward(g, &h, x, &[], Mode::Eval)?;
            let pa = g.abs(out.position)?;
            let p = g.sum(pa)?;
            let lq = g.quat_log_rows(out.rotation)?;
            let la = g.abs(lq)?;
            let q = g.sum(la)?;
            g.add(p, q)
        })
    }

    pub fn to_checkpoint(&self, history: Vec<LossRecord>) -> Checkpoint {
        let mut named: Vec<(String, Matrix)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        if self.config.use_hebbian && self.config.save_memory {
            named.push((MEMORY_TENSOR.to_string(), self.memory.w.clone()));
        }
        Checkpoint::new(self.config.clone(), self.grid, named, history)
    }

    /// Rebuilds a model from a checkpoint. A missing memory tensor leaves
    /// the memory empty.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.manifest.config.clone();
        config.validate()?;
        let slots = layout(&config);
        let d = config.feature_dim;
        let mut expected: Vec<(String, (usize, usize))> = slots.iter().map(|s| (s.name.clone(), s.shape)).collect();
        if config.use_hebbian {
            expected.push((MEMORY_TENSOR.to_string(), (d, d)));
        }
        let mut values = ck.reconcile(&expected, &[MEMORY_TENSOR])?;
        let mut memory = HebbianMemory::new(d, config.memory_mode);
        if config.use_hebbian {
            if let Some(w) = values.pop().flatten() {
                memory.w = w;
            }
        }
        let params = slots
            .into_iter()
            .zip(values)
            .map(|(s, v)| Param {
                name: s.name,
                value: v.expect("required tensors are present after reconcile"),
                trainable: s.trainable,
                decay: s.decay,
            })
            .collect();
        if config.use_grid && ck.manifest.grid.is_none() {
            return Err(Error::Checkpoint(
                "grid head enabled but no grid specification stored".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            grid: ck.manifest.grid,
            memory,
        })
    }
}

/// `term·e^(−w) + w` for a 1×1 term and weight.
fn weighted(g: &mut Graph, term: Var, w: Var) -> Result<Var> {
    let neg = g.scale(w, -1.0)?;
    let factor = g.exp(neg)?;
    let scaled = g.hadamard(term, factor)?;
    g.add(scaled, w)
}

/// Batch mean of the row-wise L1 norms of `a − b`.
fn mean_l1(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let abs = g.abs(diff)?;
    let total = g.sum(abs)?;
    g.scale(total, 1.0 / a.rows() as f64)
}

/// Weighted pose loss over a batch. The grid term is included exactly when
/// both a grid output and grid targets are present.
pub fn pose_loss(
    g: &mut Graph,
    out: &Outputs,
    targets: &Targets,
    alpha: Var,
    beta: Var,
    gamma: Option<Var>,
) -> Result<LossParts> {
    let p_true = g.constant(targets.position.clone());
    let position = mean_l1(g, out.position, p_true)?;
    let log_q = g.quat_log_rows(out.rotation)?;
    let q_true = g.constant(targets.log_rotation.clone());
    let rotation = mean_l1(g, log_q, q_true)?;
    let mut total = weighted(g, position, alpha)?;
    let rot = weighted(g, rotation, beta)?;
    total = g.add(total, rot)?;
    let grid = match (out.grid, &targets.grid, gamma) {
        (Some(pred), Some(truth), Some(gamma)) => {
            let t = g.constant(truth.clone());
            let term = mean_l1(g, pred, t)?;
            let w = weighted(g, term, gamma)?;
            total = g.add(total, w)?;
            Some(term)
        }
        (None, None, None) => None,
        _ => {
            return Err(Error::Contract(
                "grid output, targets and weight must be all present or all absent".into(),
            ))
        }
    };
    Ok(LossParts {
        total,
        position,
        rotation,
        grid,
    })
}

/// Center of the grid cell holding the sample's true position.
pub fn grid_truth(sample: &SceneSample, spec: &GridSpec) -> Vec3 {
    grid_center(spec, sample.pose.position)
}

/// Fills in `grid_center` for every sample.
pub fn assign_grid_centers(samples: &mut [SceneSample], spec: &GridSpec) {
    for s in samples {
        s.grid_center = Some(grid_truth(s, spec));
    }
}

/// `|∂f/∂x|` for a scalar objective `f` of a single input row, divided by
/// its largest entry (all zeros when the gradient vanishes).
pub fn saliency_map<F>(input: &Matrix, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let objective = f(&mut g, x)?;
    let grads = g.backward(objective)?;
    let mut s: Vec<f64> = grads.wrt(x).as_slice().iter().map(|v| v.abs()).collect();
    let max = s.iter().copied().fold(0.0, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("saliency gradient".into()));
    }
    if max > 0.0 {
        s.iter_mut().for_each(|v| *v /= max);
    }
    Ok(s)
}
