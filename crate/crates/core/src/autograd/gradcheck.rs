//! Central finite-difference verification of tape gradients (64-bit only).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Group, ParamStore};
use super::tape::{NormMode, OpKind, PoolAxes, Tape, Var};
use crate::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Parameters larger than this are checked on a seeded coordinate sample.
    pub max_coords_per_param: usize,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_coords_per_param: 24,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub group: Group,
    pub coords: usize,
    /// Sampled coordinates dropped because the perturbation switched a ReLU
    /// or max-pool branch, where central differences do not measure the slope.
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tol
    }

    pub fn kinks_skipped(&self) -> usize {
        self.params.iter().map(|p| p.kinks_skipped).sum()
    }

    pub fn by_group(&self) -> BTreeMap<Group, f64> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let e = out.entry(p.group).or_insert(0.0f64);
            *e = e.max(p.max_rel_error);
        }
        out
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `loss_fn` against central differences for every
/// trainable parameter in `store`. The store is restored before returning.
pub fn grad_check<F>(store: &mut ParamStore<f64>, opts: &GradCheckOptions, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some((kind, factor)) = opts.fault {
        tape.inject_grad_fault(kind, factor);
    }
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    let base_digest = tape.branch_digest();
    let mut analytic: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (pid, var) in tape.param_vars() {
        if let Some(g) = grads.get(var) {
            analytic.insert(pid, g.to_vec());
        }
    }
    drop(tape);

    let mut eval = |store: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let v = loss_fn(store, &mut tape)?;
        Ok((tape.value(v).item(), tape.branch_digest()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        params: Vec::new(),
        tol: opts.tol,
    };
    for id in ids {
        let numel = store.get(id).value.numel();
        // Spare candidates replace coordinates that straddle a kink.
        let candidates: Vec<usize> = if numel <= opts.max_coords_per_param {
            (0..numel).collect()
        } else {
            let spare = (4 * opts.max_coords_per_param).min(numel);
            rand::seq::index::sample(&mut rng, numel, spare).into_vec()
        };
        let zeros = vec![0.0; numel];
        let a = analytic.get(&id.0).unwrap_or(&zeros);
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        for &i in &candidates {
            if checked == opts.max_coords_per_param {
                break;
            }
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.eps;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - opts.eps;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let ((plus, dp), (minus, dm)) = (plus?, minus?);
            if dp != base_digest || dm != base_digest {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let name = &store.get(id).name;
            if !numeric.is_finite() || !a[i].is_finite() {
                return Err(Error::GradCheck(format!("non-finite gradient for `{name}`[{i}]")));
            }
            worst = worst.max(relative_error(a[i], numeric));
            checked += 1;
        }
        let p = store.get(id);
        report.params.push(ParamCheck {
            name: p.name.clone(),
            group: p.group,
            coords: checked,
            kinks_skipped: skipped,
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Layer types covered by [`check_layers`].
pub const LAYER_KINDS: [&str; 9] = [
    "conv_spatial",
    "conv_temporal",
    "relu",
    "batch_norm",
    "global_pool",
    "max_pool",
    "frame_subsample",
    "linear",
    "softmax_xent",
];

type LayerFn = fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>;

fn leaf(store: &ParamStore<f64>, tape: &mut Tape<f64>, name: &str) -> Var {
    store.leaf(tape, store.id(name).expect("layer case parameter"))
}

/// Maps any tensor to a scalar through a fixed random projection into three
/// logits and a cross-entropy, so every output coordinate carries gradient.
fn probe(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = tape.value(y).numel();
    let flat = tape.reshape(y, &[1, n])?;
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let w = tape.input(Tensor::uniform(&[3, n], -1.0, 1.0, &mut rng));
    let b = tape.input(Tensor::zeros(&[3]));
    let z = tape.linear(flat, w, b)?;
    tape.softmax_xent(z, &[1])
}

fn layer_case(kind: &str, seed: u64) -> (ParamStore<f64>, LayerFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let add = |store: &mut ParamStore<f64>, name: &str, shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        store.register(name, Group::Shared, true, Tensor::uniform(shape, lo, hi, rng)).expect("fresh name");
    };
    let x5 = [2, 3, 3, 5, 5];
    let f: LayerFn = match kind {
        "conv_spatial" => {
            add(&mut store, "x", &x5, -1.0, 1.0, &mut rng);
            add(&mut store, "w", &[4, 3, 3, 3], -0.5, 0.5, &mut rng);
            add(&mut store, "b", &[4], -0.5, 0.5, &mut rng);
            |s, t| {
                let (x, w, b) = (leaf(s, t, "x"), leaf(s, t, "w"), leaf(s, t, "b"));
                let y = t.conv_spatial(x, w, Some(b), 2, 1)?;
                probe(t, y)
            }
        }
        "conv_temporal" => {
            add(&mut store, "x", &x5, -1.0, 1.0, &mut rng);
            add(&mut store, "w", &[4, 3, 3], -0.5, 0.5, &mut rng);
            add(&mut store, "b", &[4], -0.5, 0.5, &mut rng);
            |s, t| {
                let (x, w, b) = (leaf(s, t, "x"), leaf(s, t, "w"), leaf(s, t, "b"));
                let y = t.conv_temporal(x, w, Some(b), 1, 1)?;
                probe(t, y)
            }
        }
        "relu" => {
            // Inputs kept away from the kink so central differences stay one-sided.
            let mut x = Tensor::<f64>::uniform(&x5, 0.1, 1.0, &mut rng);
            let signs = Tensor::<f64>::uniform(&x5, -1.0, 1.0, &mut rng);
            x.data_mut().iter_mut().zip(signs.data()).for_each(|(v, s)| *v = v.copysign(*s));
            store.register("x", Group::Shared, true, x).expect("fresh name");
            |s, t| {
                let x = leaf(s, t, "x");
                let y = t.relu(x)?;
                probe(t, y)
            }
        }
        "batch_norm" => {
            add(&mut store, "x", &x5, -1.0, 1.0, &mut rng);
            add(&mut store, "gamma", &[3], 0.5, 1.5, &mut rng);
            add(&mut store, "beta", &[3], -0.5, 0.5, &mut rng);
            |s, t| {
                let (x, g, b) = (leaf(s, t, "x"), leaf(s, t, "gamma"), leaf(s, t, "beta"));
                let (y, _) = t.batch_norm(x, g, b, NormMode::Train, 1e-5)?;
                probe(t, y)
            }
        }
        "global_pool" => {
            add(&mut store, "x", &x5, -1.0, 1.0, &mut rng);
            |s, t| {
                let x = leaf(s, t, "x");
                let y = t.global_pool(x, PoolAxes::SPATIOTEMPORAL)?;
                probe(t, y)
            }
        }
        "max_pool" => {
            add(&mut store, "x", &x5, -1.0, 1.0, &mut rng);
            |s, t| {
                let x = leaf(s, t, "x");
                let y = t.max_pool_spatial(x, 3, 2, 1)?;
                probe(t, y)
            }
        }
        "frame_subsample" => {
            add(&mut store, "x", &x5, -1.0, 1.0, &mut rng);
            |s, t| {
                let x = leaf(s, t, "x");
                let y = t.frame_subsample(x, 2)?;
                probe(t, y)
            }
        }
        "linear" => {
            add(&mut store, "x", &[3, 10], -1.0, 1.0, &mut rng);
            add(&mut store, "w", &[4, 10], -0.5, 0.5, &mut rng);
            add(&mut store, "b", &[4], -0.5, 0.5, &mut rng);
            |s, t| {
                let (x, w, b) = (leaf(s, t, "x"), leaf(s, t, "w"), leaf(s, t, "b"));
                let y = t.linear(x, w, b)?;
                probe(t, y)
            }
        }
        "softmax_xent" => {
            add(&mut store, "logits", &[4, 6], -2.0, 2.0, &mut rng);
            |s, t| {
                let z = leaf(s, t, "logits");
                t.softmax_xent(z, &[0, 5, 2, 2])
            }
        }
        other => unreachable!("unknown layer kind {other}"),
    };
    (store, f)
}

/// Runs [`grad_check`] on one small instance of every differentiable layer
/// type, inputs included as checked parameters.
pub fn check_layers(opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    LAYER_KINDS
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let (mut store, f) = layer_case(kind, opts.seed.wrapping_add(i as u64 + 1));
            grad_check(&mut store, opts, f).map(|r| (kind, r))
        })
        .collect()
}
