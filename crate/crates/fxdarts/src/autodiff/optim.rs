//! Adam and momentum-SGD updates over flat parameter slices.

/// First/second-moment state for one Adam-managed tensor.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Adam state for a list of tensors updated together (shared step counter).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn new(lens: &[usize]) -> Self {
        Self {
            step: 0,
            slots: lens.iter().map(|&l| AdamSlot::new(l)).collect(),
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for slot in &mut self.slots {
            slot.m.iter_mut().for_each(|x| *x = 0.0);
            slot.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Advances the shared step counter and returns it, for callers that
    /// update slots individually via [`adam_step_slot`].
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }
}

/// Adam update of a single tensor slice against one state slot. `t` is the
/// already-advanced shared step count.
pub fn adam_step_slot(p: &mut [f64], g: &[f64], slot: &mut AdamSlot, t: u64, hp: &AdamParams) {
    assert_eq!(p.len(), g.len(), "gradient shape mismatch");
    assert_eq!(p.len(), slot.m.len(), "adam state shape mismatch");
    let bc1 = 1.0 - hp.beta1.powf(t as f64);
    let bc2 = 1.0 - hp.beta2.powf(t as f64);
    for i in 0..p.len() {
        let grad = g[i] + hp.weight_decay * p[i];
        slot.m[i] = hp.beta1 * slot.m[i] + (1.0 - hp.beta1) * grad;
        slot.v[i] = hp.beta2 * slot.v[i] + (1.0 - hp.beta2) * grad * grad;
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        p[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam step over aligned (parameter, gradient) slices. L2 decay is
/// folded into the gradient before the moment updates; the shared step
/// counter increments once per call.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    hp: &AdamParams,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.slots.len());
    let t = state.begin_step();
    for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut state.slots) {
        adam_step_slot(p, g, slot, t, hp);
    }
}

/// Momentum buffers for SGD.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(lens: &[usize]) -> Self {
        Self {
            velocity: lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    total
}

/// Classic momentum SGD: `v = mu*v + (g + wd*p); p -= lr*v`.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut SgdState, hp: &SgdParams) {
    assert_eq!(params.len(), grads.len());
    for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for i in 0..p.len() {
            let grad = g[i] + hp.weight_decay * p[i];
            vel[i] = hp.momentum * vel[i] + grad;
            p[i] -= hp.lr * vel[i];
        }
    }
}

/// Cosine decay from `lr0` to exactly zero at `epoch == total`.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    if epoch >= total {
        return 0.0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}
