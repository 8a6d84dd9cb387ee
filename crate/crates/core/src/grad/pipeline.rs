use alloc::vec;
use alloc::vec::Vec;

use crate::envs::Transition;
use crate::error::{domain, Error, Result};
use crate::loss::{self, LossKind};
use crate::special::{log_sum_exp, normal_log_pdf, sigmoid, softmax_into, softplus};
use crate::target::{align_with_stencil, target_samples, Interpolation, TargetConfig};

use super::network::{head_to_flow, ForwardCache, GradientSet, NetworkParams, MIN_G_MAX};

/// Predicted log-densities above this are clamped (with zero gradient) so a
/// collapsing component cannot overflow `exp`.
pub const MAX_LOG_DENSITY: f64 = 40.0;

/// Everything the training loss needs besides the online network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Order of the exact Cramér distance.
    pub cramer_p: f64,
    pub target: TargetConfig,
}

/// Per-transition quantities held constant while differentiating: the base
/// draws, the interpolation stencil built from the predicted return
/// positions, the grid, and the target densities on it.
#[derive(Debug, Clone)]
pub struct LossContext {
    state: usize,
    action: usize,
    z: Vec<f64>,
    stencil: Interpolation,
    support: Vec<f64>,
    weights: Vec<f64>,
    target: Vec<f64>,
}

impl LossContext {
    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }
}

/// Fix the non-differentiable parts of the loss for one transition at the
/// current parameters.
pub fn build_context(
    online: &NetworkParams,
    target_net: &NetworkParams,
    transition: &Transition,
    z_batch: &[f64],
    config: &LossConfig,
) -> Result<LossContext> {
    Ok(prepare(online, target_net, transition, z_batch, config)?.context)
}

/// A context together with the forward quantities needed to differentiate it.
struct Prepared {
    context: LossContext,
    cache: ForwardCache,
    ells: Vec<f64>,
    jac: Vec<f64>,
}

fn prepare(
    online: &NetworkParams,
    target_net: &NetworkParams,
    transition: &Transition,
    z_batch: &[f64],
    config: &LossConfig,
) -> Result<Prepared> {
    if z_batch.is_empty() {
        return Err(domain("z batch must be non-empty"));
    }
    if transition.action >= online.dims().n_actions {
        return Err(Error::Dimension {
            expected: online.dims().n_actions,
            got: transition.action,
        });
    }
    let cache = online.forward(&online.one_hot(transition.state)?)?;
    let head = online.head(&cache.out, transition.action);
    let params = head_to_flow(head)?;
    let ys: Vec<f64> = z_batch.iter().map(|&z| params.map(z)).collect();
    let (ells, jac) = log_densities_and_jacobian(head, z_batch);
    let target = target_samples(target_net, transition, z_batch, &config.target)?;
    let (pair, stencil) = align_with_stencil(
        &ys,
        &clamped_densities(&ells),
        &target,
        config.target.grid_size,
        config.target.bandwidth,
    )?;
    let weights = match config.kind {
        LossKind::Surrogate => loss::surrogate_weights(pair.support()),
        LossKind::Exact => Vec::new(),
    };
    let context = LossContext {
        state: transition.state,
        action: transition.action,
        z: z_batch.to_vec(),
        stencil,
        support: pair.support().to_vec(),
        weights,
        target: pair.target().to_vec(),
    };
    Ok(Prepared {
        context,
        cache,
        ells,
        jac,
    })
}

/// Log-densities of the predicted samples and their gradients with respect
/// to the action head, row-major `(samples, head width)`.
fn log_densities_and_jacobian(head: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = (head.len() - 1) / 3;
    let width = head.len();
    let mut w = vec![0.0; n];
    softmax_into(&head[..n], &mut w);
    let means = &head[n..2 * n];
    let pre_scales = &head[2 * n..3 * n];
    let scales: Vec<f64> = pre_scales
        .iter()
        .map(|&s| softplus(s) + crate::flow::MIN_SCALE)
        .collect();
    let g = softplus(head[3 * n]) + MIN_G_MAX;
    let log_w: Vec<f64> = w.iter().map(|&wi| libm::log(wi)).collect();
    let log_s: Vec<f64> = scales.iter().map(|&s| libm::log(s)).collect();
    let d_g = -sigmoid(head[3 * n]) / g;
    let log_2g = libm::log(2.0 * g);

    let mut ells = Vec::with_capacity(z.len());
    let mut jac = vec![0.0; z.len() * width];
    let mut terms = vec![0.0; n];
    let mut u = vec![0.0; n];
    for (k, &zk) in z.iter().enumerate() {
        for i in 0..n {
            u[i] = (zk - means[i]) / scales[i];
            terms[i] = log_w[i] + normal_log_pdf(u[i]) - log_s[i];
        }
        let log_f = log_sum_exp(&terms);
        ells.push(normal_log_pdf(zk) - log_f - log_2g);
        let row = &mut jac[k * width..(k + 1) * width];
        for i in 0..n {
            // responsibility of component i at z_k
            let r = libm::exp(terms[i] - log_f);
            row[i] = -(r - w[i]);
            row[n + i] = -r * u[i] / scales[i];
            row[2 * n + i] = -r * (u[i] * u[i] - 1.0) / scales[i] * sigmoid(pre_scales[i]);
        }
        row[3 * n] = d_g;
    }
    (ells, jac)
}

fn clamped_densities(ells: &[f64]) -> Vec<f64> {
    ells.iter().map(|&l| libm::exp(l.min(MAX_LOG_DENSITY))).collect()
}

/// Loss of one context as a function of the online parameters, with every
/// constant part held at its stored value.
pub fn frozen_loss(net: &NetworkParams, ctx: &LossContext, config: &LossConfig) -> Result<f64> {
    let cache = net.forward(&net.one_hot(ctx.state)?)?;
    let head = net.head(&cache.out, ctx.action);
    head_to_flow(head)?;
    let (ells, _) = log_densities_and_jacobian(head, &ctx.z);
    let predicted = ctx.stencil.apply(&clamped_densities(&ells));
    Ok(loss::value_only(
        config.kind,
        config.cramer_p,
        &ctx.support,
        &ctx.weights,
        &predicted,
        &ctx.target,
    ))
}

/// Loss of one context and its gradient, accumulated into `grads` with
/// factor `scale`.
pub fn context_loss_and_grad(
    net: &NetworkParams,
    ctx: &LossContext,
    config: &LossConfig,
    scale: f64,
    grads: &mut GradientSet,
) -> Result<f64> {
    let cache = net.forward(&net.one_hot(ctx.state)?)?;
    let head = net.head(&cache.out, ctx.action);
    head_to_flow(head)?;
    let (ells, jac) = log_densities_and_jacobian(head, &ctx.z);
    accumulate(net, ctx, &cache, &ells, &jac, config, scale, grads)
}

#[allow(clippy::too_many_arguments)]
fn accumulate(
    net: &NetworkParams,
    ctx: &LossContext,
    cache: &ForwardCache,
    ells: &[f64],
    jac: &[f64],
    config: &LossConfig,
    scale: f64,
    grads: &mut GradientSet,
) -> Result<f64> {
    let width = net.dims().head_width();
    let dens = clamped_densities(ells);
    let predicted = ctx.stencil.apply(&dens);
    let (value, d_grid) = loss::value_and_grad(
        config.kind,
        config.cramer_p,
        &ctx.support,
        &ctx.weights,
        &predicted,
        &ctx.target,
    );
    let mut d_dens = vec![0.0; dens.len()];
    ctx.stencil.pull_back(&d_grid, &mut d_dens);
    let mut d_out = vec![0.0; cache.out.len()];
    let d_head = &mut d_out[ctx.action * width..(ctx.action + 1) * width];
    for (k, (&dd, &ell)) in d_dens.iter().zip(ells).enumerate() {
        if dd == 0.0 || ell > MAX_LOG_DENSITY {
            continue;
        }
        let d_ell = scale * dd * dens[k];
        for (dh, &j) in d_head.iter_mut().zip(&jac[k * width..(k + 1) * width]) {
            *dh += d_ell * j;
        }
    }
    net.backward(cache, &d_out, grads);
    Ok(value)
}

/// Mean loss over a batch and its gradient with respect to the online
/// parameters. One `z_batch` is shared by every transition.
pub fn loss_and_grad(
    net: &NetworkParams,
    target_net: &NetworkParams,
    batch: &[Transition],
    z_batch: &[f64],
    config: &LossConfig,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(domain("batch must be non-empty"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = GradientSet::zeros(*net.dims());
    let mut total = 0.0;
    for t in batch {
        let p = prepare(net, target_net, t, z_batch, config)?;
        total += accumulate(net, &p.context, &p.cache, &p.ells, &p.jac, config, scale, &mut grads)?;
    }
    Ok((total * scale, grads))
}

/// Mean frozen loss over a set of contexts; the finite-difference reference
/// for [`loss_and_grad`].
pub fn frozen_batch_loss(net: &NetworkParams, contexts: &[LossContext], config: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for ctx in contexts {
        total += frozen_loss(net, ctx, config)?;
    }
    Ok(total / contexts.len() as f64)
}
