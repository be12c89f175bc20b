//! Two-layer perceptron over the off-diagonal connectivity entries; trained
//! jointly with the generator so the class loss shapes the estimated matrices.

use rand::RngCore;

use crate::params::{xavier2, zeros, Binding, ParamId, ParamStore};
use crate::tape::Var;

pub struct ClassifierHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pub n_classes: usize,
    param_range: (usize, usize),
}

impl ClassifierHead {
    pub fn new(
        store: &mut ParamStore,
        n_rois: usize,
        hidden: usize,
        n_classes: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let start = store.len();
        let input = n_rois * (n_rois - 1);
        let w1 = store.add("c.w1", xavier2(rng, input, hidden));
        let b1 = store.add("c.b1", zeros(&[hidden]));
        let w2 = store.add("c.w2", xavier2(rng, hidden, n_classes));
        let b2 = store.add("c.b2", zeros(&[n_classes]));
        Self { w1, b1, w2, b2, n_classes, param_range: (start, store.len()) }
    }

    pub fn param_ids(&self) -> std::ops::Range<ParamId> {
        self.param_range.0..self.param_range.1
    }

    /// Logits for one connectivity matrix.
    pub fn forward<'t>(&self, b: &Binding<'t>, a: Var<'t>) -> Var<'t> {
        let feats = a.offdiag_to_row();
        let h = feats.matmul(b.var(self.w1)).add_row_vector(b.var(self.b1)).gelu();
        h.matmul(b.var(self.w2)).add_row_vector(b.var(self.b2)).reshape(&[self.n_classes])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;

    #[test]
    fn logit_shape_matches_class_count() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
        let head = ClassifierHead::new(&mut store, 5, 8, 3, &mut rng);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let a = tape.leaf2(ndarray::Array2::from_elem((5, 5), 0.1));
        let logits = head.forward(&b, a);
        assert_eq!(logits.shape(), vec![3]);
    }
}
