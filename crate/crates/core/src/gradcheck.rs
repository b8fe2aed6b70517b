//! Central-difference gradient checks for every differentiable module.
//!
//! Each check builds a scalar `L = Σ out ⊙ R` with a fixed random `R`, runs
//! backward at 64-bit precision, and compares sampled coordinates of every
//! input and parameter gradient against `(L(x + h) − L(x − h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::afi::{fuse_all, FuseLevel, LowLevelRefine, ResidualUnit};
use crate::attention::{ChannelAttention, SpatialAttention};
use crate::backbone::Backbone;
use crate::cca::Cca;
use crate::config::{BackboneConfig, ModelConfig};
use crate::error::Result;
use crate::model::CaaiNet;
use crate::nn::{channel_max, channel_mean, conv2d, global_avg_pool, max_pool2, resample, Graph};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{concat_channels, Tape, Tensor, Var};
use crate::train::bce_loss;

pub const STEP: f64 = 1e-3;
/// Relative errors are `|a − n| / max(|a|, |n|, REL_FLOOR)`; the floor keeps
/// gradients that are zero up to rounding from dominating the maximum.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates where `x ± STEP` leaves the smooth piece (a ReLU sign or a
/// max choice flips) have no derivative to compare and are skipped. A check
/// must still compare at least this many coordinates.
pub const MIN_COMPARED: usize = 20;

#[derive(Clone, Debug)]
pub struct ModuleReport {
    pub module: &'static str,
    pub max_rel_error: f64,
    /// Leaf name and flat index of the worst coordinate.
    pub worst: String,
    /// Coordinates sampled, including skipped ones.
    pub coords: usize,
    /// Coordinates skipped because the step crosses a kink.
    pub kinks: usize,
}

impl ModuleReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.coords - self.kinks >= MIN_COMPARED
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A differentiable function of some input leaves and the parameters in a
/// store.
pub trait Probe {
    fn eval<'t>(&self, g: Graph<'t, f64>, inputs: &[Var<'t, f64>]) -> Result<Var<'t, f64>>;
}

impl<F> Probe for F
where
    F: for<'t> Fn(Graph<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    fn eval<'t>(&self, g: Graph<'t, f64>, inputs: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        self(g, inputs)
    }
}

/// Pins a closure to the higher-ranked signature `Probe` needs.
fn probe<F>(f: F) -> F
where
    F: for<'t> Fn(Graph<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    f
}

enum Leaf {
    Input(usize),
    Param(ParamId),
}

fn projected_loss(
    probe: &dyn Probe,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
) -> Result<(f64, Vec<u64>)> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = probe.eval(Graph::new(&tape, store), &vars)?;
    let loss = out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
    Ok((loss, tape.branch_signature()))
}

/// Checks `probe` with respect to all `inputs` and every parameter in
/// `store`, sampling up to `per_leaf` coordinates from each leaf.
pub fn check(
    module: &'static str,
    probe: &dyn Probe,
    store: &mut ParamStore<f64>,
    inputs: &mut [Tensor<f64>],
    per_leaf: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ModuleReport> {
    let (weights, analytic) = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = probe.eval(Graph::new(&tape, store), &vars)?;
        let w = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0));
        let loss = out.mul(tape.constant(w.clone()))?.sum();
        let grads = tape.backward(loss)?;
        let mut analytic: Vec<(Leaf, String, Tensor<f64>)> = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()));
            analytic.push((Leaf::Input(i), format!("input{i}"), g));
        }
        let pg: Vec<_> = grads.param_grads().map(|(id, g)| (id, g.clone())).collect();
        for (id, p) in store.iter() {
            let g = pg
                .iter()
                .find(|(pid, _)| *pid == id)
                .map(|(_, g)| g.clone())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            analytic.push((Leaf::Param(id), p.name.clone(), g));
        }
        (w, analytic)
    };

    let mut report = ModuleReport {
        module,
        max_rel_error: 0.0,
        worst: String::new(),
        coords: 0,
        kinks: 0,
    };
    for (leaf, name, grad) in &analytic {
        let n = grad.numel();
        let picks: Vec<usize> = if n <= per_leaf {
            (0..n).collect()
        } else {
            (0..per_leaf).map(|_| rng.random_range(0..n)).collect()
        };
        for idx in picks {
            let set = |value: Option<f64>, store: &mut ParamStore<f64>, inputs: &mut [Tensor<f64>]| {
                let slot = match leaf {
                    Leaf::Input(i) => &mut inputs[*i].data_mut()[idx],
                    Leaf::Param(id) => &mut store.get_mut(*id).value.data_mut()[idx],
                };
                let old = *slot;
                if let Some(v) = value {
                    *slot = v;
                }
                old
            };
            let x0 = set(None, store, inputs);
            set(Some(x0 + STEP), store, inputs);
            let plus = projected_loss(probe, store, inputs, &weights);
            set(Some(x0 - STEP), store, inputs);
            let minus = projected_loss(probe, store, inputs, &weights);
            set(Some(x0), store, inputs);
            let ((plus, sig_plus), (minus, sig_minus)) = (plus?, minus?);
            report.coords += 1;
            let (_, sig) = projected_loss(probe, store, inputs, &weights)?;
            if sig_plus != sig || sig_minus != sig {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = rel_error(grad.data()[idx], numeric);
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = format!("{name}[{idx}]");
            }
        }
    }
    Ok(report)
}

fn randn(shape: impl Into<Vec<usize>>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Small configuration used by the end-to-end checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            channels: [4, 4, 8, 8, 8],
            convs_per_block: [1, 1, 1, 1, 1],
            input_size: 16,
            ..BackboneConfig::desk()
        },
        c_common: 8,
        c_fuse: 4,
        head_channels: 4,
    }
}

/// Runs every module check for one seed.
pub fn run_suite(seed: u64) -> Result<Vec<ModuleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut reports = Vec::new();
    let none = &mut ParamStore::<f64>::new();

    // Tensor core.
    let mut xs = vec![
        randn([2, 3, 4, 4], 1.0, r),
        randn([1, 3, 1, 1], 1.0, r),
        randn([2, 3, 4, 4], 1.0, r),
    ];
    xs[2] = xs[2].map(|v| v.abs() + 0.5);
    let p = probe(|_, x| {
        let a = x[0].mul(x[1])?.add(x[0])?;
        let b = a.sub(x[1])?.div(x[2])?;
        concat_channels(&[b, x[0]])
    });
    reports.push(check("elementwise+concat", &p, none, &mut xs, 24, r)?);

    let mut xs = vec![randn([2, 2, 3, 3], 2.0, r), Tensor::scalar(0.25)];
    let p = probe(|_, x| {
        let s = x[0].sigmoid().reverse().mul_scalar(0.5).add_scalar(0.1);
        concat_channels(&[s, x[0].prelu(x[1])?, x[0].relu()])
    });
    reports.push(check("activations", &p, none, &mut xs, 24, r)?);

    // Layer primitives.
    let mut xs = vec![
        randn([2, 3, 5, 5], 1.0, r),
        randn([4, 3, 3, 3], 0.5, r),
        randn([4], 0.5, r),
    ];
    let p = probe(|_, x| conv2d(x[0], x[1], Some(x[2]), 1, 1));
    reports.push(check("conv2d", &p, none, &mut xs, 24, r)?);

    let mut xs = vec![randn([1, 2, 4, 6], 1.0, r)];
    let p = probe(|_, x| {
        let up = resample(x[0], 7, 9)?;
        let down = resample(x[0], 3, 2)?;
        up.sum().add(down.mean())
    });
    reports.push(check("resample", &p, none, &mut xs, 24, r)?);

    let mut xs = vec![randn([2, 3, 4, 4], 1.0, r)];
    let p = probe(|_, x| {
        let a = max_pool2(x[0])?.sum();
        let b = global_avg_pool(x[0])?.sum();
        let c = channel_mean(x[0])?.add(channel_max(x[0])?)?.sum();
        a.add(b)?.add(c)
    });
    reports.push(check("pooling", &p, none, &mut xs, 24, r)?);

    let cfg = tiny_config();

    // Backbone.
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, "bb", &cfg.backbone, 3, r);
    let mut xs = vec![randn([1, 3, 16, 16], 1.0, r)];
    let p = probe(|g, x| {
        let pyr = bb.extract(g, x[0])?;
        let parts: Vec<_> = pyr.levels.iter().map(|l| l.mean()).collect();
        parts[1..].iter().try_fold(parts[0], |acc, v| acc.add(*v))
    });
    reports.push(check("backbone", &p, &mut store, &mut xs, 8, r)?);

    // Attention.
    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut store, "ca", 8, r)?;
    let sa = SpatialAttention::new(&mut store, "sa", r);
    let mut xs = vec![randn([2, 8, 4, 4], 1.0, r)];
    let p = probe(|g, x| sa.forward(g, ca.forward(g, x[0])?));
    reports.push(check("attention", &p, &mut store, &mut xs, 6, r)?);

    // CCA.
    let mut store = ParamStore::new();
    let cca = Cca::new(&mut store, "cca", [8, 8, 8], 8, r)?;
    let mut xs = vec![
        randn([1, 8, 8, 8], 1.0, r),
        randn([1, 8, 4, 4], 1.0, r),
        randn([1, 8, 2, 2], 1.0, r),
    ];
    let p = probe(|g, x| {
        let out = cca.forward(g, [x[0], x[1], x[2]])?;
        let [a, b, c] = out.f_hat;
        a.mean().add(b.mean())?.add(c.mean())
    });
    reports.push(check("cca", &p, &mut store, &mut xs, 4, r)?);

    // AFI.
    let mut store = ParamStore::new();
    let refine = LowLevelRefine::new(&mut store, "low", r);
    let level = FuseLevel::new(&mut store, "fuse", 4, 6, r);
    let unit = ResidualUnit::new(&mut store, "res", 8, 4, 8, r);
    let mut xs = vec![
        randn([1, 4, 4, 4], 1.0, r),
        randn([1, 4, 4, 4], 1.0, r),
        randn([1, 6, 8, 8], 1.0, r),
        randn([1, 4, 8, 8], 1.0, r),
    ];
    let p = probe(|g, x| {
        let [rgb, _] = refine.forward(g, [x[0], x[0]])?;
        let parts = level.forward(g, rgb, x[1], x[2])?;
        let fused = unit.forward(g, parts.output)?;
        fuse_all(&[fused, x[3]])
    });
    reports.push(check("afi", &p, &mut store, &mut xs, 4, r)?);

    // Loss, with respect to the prediction only.
    let gt = Tensor::from_fn([1, 1, 5, 5], |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
    let mut xs = vec![randn([1, 1, 5, 5], 2.0, r)];
    let p = probe(|g, x| bce_loss(x[0].sigmoid(), g.tape.constant(gt.clone())));
    reports.push(check("bce", &p, none, &mut xs, 25, r)?);

    // Whole network.
    let net = CaaiNet::<f64>::new(&cfg, r.random())?;
    let mut store = net.params.clone();
    let mut xs = vec![
        randn([1, 3, 16, 16], 1.0, r).map(f64::abs),
        randn([1, 1, 16, 16], 1.0, r).map(f64::abs),
    ];
    let p = probe(|g, x| {
        let fr = net.rgb.forward(g, x[0])?;
        let fd = net.depth.forward(g, x[1])?;
        let fused = net.afi.forward(g, fr.levels, fd.levels)?;
        net.head.forward(g, fused)
    });
    reports.push(check("model", &p, &mut store, &mut xs, 2, r)?);
    Ok(reports)
}
