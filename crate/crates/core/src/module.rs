//! Named parameter access shared by blocks, the model and the optimizer.

use crate::numerics::Tensor;

pub trait Module {
    /// Every trainable tensor with a dotted name, in a fixed order.
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn nest<T>(prefix: &str, inner: Vec<(String, T)>) -> Vec<(String, T)> {
    inner.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

macro_rules! leaf_params {
    (ref $s:ident: $($f:ident),* $(,)?) => {
        vec![$((stringify!($f).to_string(), &$s.$f)),*]
    };
    (mut $s:ident: $($f:ident),* $(,)?) => {
        vec![$((stringify!($f).to_string(), &mut $s.$f)),*]
    };
}
pub(crate) use leaf_params;
