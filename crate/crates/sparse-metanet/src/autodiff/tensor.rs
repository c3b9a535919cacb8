use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

struct Inner {
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    name: Option<String>,
}

/// A dense fp64 tensor handle. Cloning is cheap and aliases the same storage,
/// which is how the tape refers back to the tensors an operation touched.
///
/// Leaf parameters are created with [`Tensor::param`] and keep their values
/// across tape truncations; intermediates are produced by [`super::Graph`]
/// ops and die with the tape.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    fn build(values: Vec<f64>, shape: &[usize], requires_grad: bool, name: Option<String>) -> Self {
        debug_assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "value count must match shape"
        );
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                name,
            }),
        }
    }

    /// A named trainable leaf. The name surfaces in optimizer errors and
    /// checkpoint keys.
    pub fn param(name: impl Into<String>, values: Vec<f64>, shape: &[usize]) -> Self {
        Tensor::build(values, shape, true, Some(name.into()))
    }

    /// A constant leaf: no gradient ever flows into it.
    pub fn constant(values: Vec<f64>, shape: &[usize]) -> Self {
        Tensor::build(values, shape, false, None)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(vec![0.0; shape.iter().product()], shape)
    }

    /// Tape-internal: an op output that participates in backward.
    pub(crate) fn intermediate(values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Self {
        Tensor::build(values, shape, requires_grad, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn name(&self) -> Option<&str> {
        self.inner.name.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.inner.values.borrow()
    }

    pub(crate) fn values_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.values.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.inner.values.borrow();
        assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        v[0]
    }

    /// Overwrite values in place. Shape is fixed at construction.
    pub fn set_values(&self, values: &[f64]) {
        let mut v = self.inner.values.borrow_mut();
        assert_eq!(v.len(), values.len(), "set_values length mismatch");
        v.copy_from_slice(values);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add `delta` into the gradient accumulator, allocating it on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn seed_grad(&self, seed: Vec<f64>) {
        *self.inner.grad.borrow_mut() = Some(seed);
    }

    /// A constant copy of the current values, cut off from any history.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_vec(), &self.inner.shape)
    }

    /// Storage identity, used to deduplicate tensors that appear in several
    /// tape nodes.
    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("name", &self.inner.name)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
