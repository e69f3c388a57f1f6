use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::element::Element;
use crate::error::{Result, TensorError};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations on the tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Inputs handed to an op's backward closure.
pub struct BackwardArgs<'a, T: Element> {
    /// Gradient of the loss with respect to the op output.
    pub grad: &'a [T],
    /// Forward value of the op output.
    pub output: &'a [T],
    pub output_shape: &'a [usize],
    /// The op inputs, in the order they were registered.
    pub inputs: &'a [Tensor<T>],
}

/// Maps the output gradient to one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradNode<T: Element> {
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    node: Option<GradNode<T>>,
    grad: Mutex<Option<Vec<T>>>,
}

impl<T: Element> Drop for Inner<T> {
    // Long op chains would otherwise drop recursively through `inputs`.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor<T>> = match self.node.take() {
            Some(node) => node.inputs,
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.inner) {
                if let Some(node) = inner.node.take() {
                    stack.extend(node.inputs);
                }
            }
        }
    }
}

/// Dense row-major N-d array with optional gradient tracking.
///
/// Cloning is cheap: the value buffer is shared. Values are immutable once
/// constructed; only the accumulated gradient of a leaf can change.
pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, dtype={:?}, requires_grad={})",
            self.inner.id,
            self.inner.shape,
            T::DTYPE,
            self.inner.requires_grad
        )
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(
        data: Arc<Vec<T>>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<GradNode<T>>,
    ) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                node,
                grad: Mutex::new(None),
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected: numel(shape),
                actual: data.len(),
            });
        }
        Ok(Self::build(Arc::new(data), shape.to_vec(), false, None))
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Arc::new(vec![v]), vec![], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(Arc::new(vec![v; numel(shape)]), shape.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self::build(Arc::new(data), shape.to_vec(), false, None)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::from_f64(rng.random_range(lo..hi)))
            .collect();
        Self::build(Arc::new(data), shape.to_vec(), false, None)
    }

    /// Result of a differentiable op. The backward closure is recorded only
    /// when grad mode is on and some input requires a gradient.
    pub fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::build(Arc::new(data), shape, false, None);
        }
        let node = GradNode {
            inputs,
            backward: Box::new(backward),
        };
        Self::build(Arc::new(data), shape, true, Some(node))
    }

    /// Same buffer under a new shape. Used by `reshape`.
    pub(crate) fn share_with_shape(&self, shape: Vec<usize>) -> Self {
        let data = Arc::clone(&self.inner.data);
        if !(is_grad_enabled() && self.requires_grad()) {
            return Self::build(data, shape, false, None);
        }
        let node = GradNode {
            inputs: vec![self.clone()],
            backward: Box::new(|args| vec![Some(args.grad.to_vec())]),
        };
        Self::build(data, shape, true, Some(node))
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.inner.data[0]
    }

    /// Splits a rank-4 shape into `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(crate::error::shape_err(
                "dims4",
                format!("expected rank 4, got shape {:?}", self.shape()),
            )),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// A new leaf that shares this value and tracks its own gradient.
    pub fn to_leaf(&self) -> Self {
        Self::build(
            Arc::clone(&self.inner.data),
            self.inner.shape.clone(),
            true,
            None,
        )
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(
            Arc::clone(&self.inner.data),
            self.inner.shape.clone(),
            false,
            None,
        )
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let g = self.inner.grad.lock().unwrap();
        g.as_ref()
            .map(|g| Self::build(Arc::new(g.clone()), self.inner.shape.clone(), false, None))
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    fn accumulate_grad(&self, g: Vec<T>) {
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a one-element loss. Gradients are accumulated
    /// into every reachable leaf that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                None => t.accumulate_grad(g),
                Some(node) => {
                    let args = BackwardArgs {
                        grad: &g,
                        output: &t.inner.data,
                        output_shape: &t.inner.shape,
                        inputs: &node.inputs,
                    };
                    let input_grads = (node.backward)(&args);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel());
                        match grads.get_mut(&input.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(ig) {
                                    *a = *a + b;
                                }
                            }
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph rooted at `self`.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
