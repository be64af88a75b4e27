use super::layers::Dims;
use super::real::Real;
use crate::rng::Rng;

/// A differentiable map from a channel-stacked feature map (plus scalar
/// conditions such as timestep or slice position) to an output map with the
/// same spatial extent.
pub trait Network: Send + Sync {
    type Cache<T: Real>: Send;

    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    /// Number of scalar conditions consumed per call.
    fn cond_inputs(&self) -> usize;
    fn num_params(&self) -> usize;
    fn init_params<T: Real>(&self, rng: &mut Rng) -> Vec<T>;
    /// Whether this network accepts the given spatial extent.
    fn supports(&self, dims: Dims) -> bool;

    fn forward<T: Real>(&self, p: &[T], x: &[T], dims: Dims, cond: &[f64]) -> (Vec<T>, Self::Cache<T>);

    fn infer<T: Real>(&self, p: &[T], x: &[T], dims: Dims, cond: &[f64]) -> Vec<T> {
        self.forward(p, x, dims, cond).0
    }

    /// Accumulate parameter gradients for output gradient `dout`.
    fn backward<T: Real>(&self, p: &[T], cache: Self::Cache<T>, dout: &[T], grad: &mut [T]);
}
