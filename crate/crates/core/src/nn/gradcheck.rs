//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Gradients, ParameterStore};
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation for central differences.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tolerance: f64,
    /// Absolute differences at or below this are accepted regardless of relative error.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced entries per array.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, rel_tolerance: 1e-4, abs_floor: 1e-6, max_entries_per_param: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlaggedEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub flagged: Vec<FlaggedEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn flagged_count(&self) -> usize {
        self.params.iter().map(|p| p.flagged.len()).sum()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for p in &self.params {
            s.push_str(&format!(
                "{:<24} checked {:>5}  max rel {:.3e}  max abs {:.3e}  flagged {}\n",
                p.name,
                p.checked,
                p.max_rel_error,
                p.max_abs_error,
                p.flagged.len()
            ));
        }
        s
    }
}

/// Compares `analytic` against central differences of `loss` around `store`.
pub fn finite_difference_check<F>(
    store: &ParameterStore,
    analytic: &Gradients,
    mut loss: F,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for idx in 0..store.len() {
        let n = store.value(idx).len();
        let stride = match config.max_entries_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: store.name(idx).to_string(),
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            flagged: Vec::new(),
        };
        for k in (0..n).step_by(stride) {
            let original = store.value(idx).data()[k];
            probe.value_mut(idx).data_mut()[k] = original + config.step;
            let plus = loss(&probe)?;
            probe.value_mut(idx).data_mut()[k] = original - config.step;
            let minus = loss(&probe)?;
            probe.value_mut(idx).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.get(idx).data()[k];
            let abs_err = (a - numeric).abs();
            let rel_err = if abs_err <= config.abs_floor { 0.0 } else { abs_err / a.abs().max(numeric.abs()) };
            check.checked += 1;
            check.max_abs_error = check.max_abs_error.max(abs_err);
            check.max_rel_error = check.max_rel_error.max(rel_err);
            if rel_err > config.rel_tolerance {
                check.flagged.push(FlaggedEntry { index: k, analytic: a, numeric });
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Layers with a self-contained gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    FullyConnected,
    Conv,
    MaxPool,
    Lstm,
    GaussianNll,
    SoftmaxCrossEntropy,
}

impl Layer {
    pub const ALL: [Layer; 6] =
        [Layer::FullyConnected, Layer::Conv, Layer::MaxPool, Layer::Lstm, Layer::GaussianNll, Layer::SoftmaxCrossEntropy];

    pub fn name(self) -> &'static str {
        match self {
            Layer::FullyConnected => "fully connected",
            Layer::Conv => "conv",
            Layer::MaxPool => "max-pool",
            Layer::Lstm => "lstm",
            Layer::GaussianNll => "gaussian nll",
            Layer::SoftmaxCrossEntropy => "softmax cross-entropy",
        }
    }

    /// Random inputs and weights, all stored as parameters so input gradients
    /// are checked too.
    fn store(self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        let mut add = |name: &str, shape: Vec<usize>, scale: f64| -> Result<()> {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
            s.insert(name, Tensor::new(shape, data)?)?;
            Ok(())
        };
        match self {
            Layer::FullyConnected => {
                add("x", vec![3 * 4], 1.0)?;
                add("w", vec![5, 4], 1.0)?;
                add("b", vec![5], 0.5)?;
                add("proj", vec![1, 15], 1.0)?;
            }
            Layer::Conv => {
                add("x", vec![2 * 5 * 4], 1.0)?;
                add("k", vec![3, 2, 3, 3], 0.5)?;
                add("b", vec![3], 0.5)?;
                add("proj", vec![1, 3 * 3 * 2], 1.0)?;
            }
            Layer::MaxPool => {
                add("x", vec![2 * 6 * 3], 1.0)?;
                add("proj", vec![1, 2 * 3 * 3], 1.0)?;
            }
            Layer::Lstm => {
                add("x", vec![4 * 3], 1.0)?;
                add("w_ih", vec![16, 3], 0.7)?;
                add("w_hh", vec![16, 4], 0.7)?;
                add("b", vec![16], 0.3)?;
                add("proj", vec![1, 8], 1.0)?;
            }
            Layer::GaussianNll => {
                add("raw", vec![4 * 5], 1.0)?;
            }
            Layer::SoftmaxCrossEntropy => {
                add("logits", vec![6], 2.0)?;
            }
        }
        Ok(s)
    }

    fn loss(self, g: &mut Graph<'_>, seed: u64) -> Result<Var> {
        let project = |g: &mut Graph<'_>, y: Var| -> Result<Var> {
            let proj = g.param("proj")?;
            g.linear(y, proj, None)
        };
        match self {
            Layer::FullyConnected => {
                let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
                let y = g.linear(x, w, Some(b))?;
                let y = g.leaky_relu(y, 0.1);
                project(g, y)
            }
            Layer::Conv => {
                let (x, k, b) = (g.param("x")?, g.param("k")?, g.param("b")?);
                let (y, _) = g.conv2d(x, [2, 5, 4], k, b, (1, 1), (0, 0))?;
                project(g, y)
            }
            Layer::MaxPool => {
                let x = g.param("x")?;
                let (y, _) = g.max_pool2d(x, [2, 6, 3], (2, 1))?;
                project(g, y)
            }
            Layer::Lstm => {
                let (x, w_ih, w_hh, b) = (g.param("x")?, g.param("w_ih")?, g.param("w_hh")?, g.param("b")?);
                let pre = g.linear(x, w_ih, None)?;
                let mut state = None;
                for row in 0..4 {
                    state = Some(g.lstm_step(pre, row, state, w_hh, b)?);
                }
                project(g, state.expect("four steps"))
            }
            Layer::GaussianNll => {
                let raw = g.param("raw")?;
                let params = g.trajectory_head(raw, 0.5)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
                let targets = (0..4).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
                g.gaussian_nll(params, targets)
            }
            Layer::SoftmaxCrossEntropy => {
                let logits = g.param("logits")?;
                g.softmax_cross_entropy(logits, (seed % 6) as usize)
            }
        }
    }
}

/// Finite-difference check of one layer at random inputs drawn from `seed`.
pub fn check_layer(layer: Layer, seed: u64, config: GradCheckConfig) -> Result<GradCheckReport> {
    let store = layer.store(seed)?;
    let mut g = Graph::new(&store);
    let l = layer.loss(&mut g, seed)?;
    let analytic = g.backward(l);
    finite_difference_check(
        &store,
        &analytic,
        |s| {
            let mut g = Graph::new(s);
            let l = layer.loss(&mut g, seed)?;
            Ok(g.value(l)[0])
        },
        config,
    )
}
