//! The five training objectives. All operate on tape variables so gradients
//! flow; discriminator scores arrive strictly inside (0, 1), keeping every
//! logarithm finite.

use crate::tape::{cross_entropy_logits, Var};

/// Non-saturating generator loss: -log D(fake).
pub fn loss_seg(d_fake: Var<'_>) -> Var<'_> {
    d_fake.ln().scale(-1.0)
}

/// Discriminator loss: -log D(real) - log(1 - D(fake)).
pub fn loss_mdd<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Var<'t> {
    let real_term = d_real.ln().scale(-1.0);
    let fake_term = d_fake.scale(-1.0).add_scalar(1.0).ln().scale(-1.0);
    real_term.add(fake_term)
}

/// Mean absolute reconstruction error.
pub fn loss_rec<'t>(f0_hat: Var<'t>, f0: Var<'t>) -> Var<'t> {
    f0_hat.sub(f0).abs().mean_all()
}

/// Sparse-connectivity penalty: gamma · Σ|A_ij| (the diagonal is exactly zero
/// by construction, so the sum runs over off-diagonal entries).
pub fn loss_scp(a: Var<'_>, gamma: f64) -> Var<'_> {
    a.abs().sum_all().scale(gamma)
}

/// Negative log-likelihood of the true class under softmax of the logits.
pub fn loss_cls(logits: Var<'_>, label: usize) -> Var<'_> {
    cross_entropy_logits(logits, label)
}
