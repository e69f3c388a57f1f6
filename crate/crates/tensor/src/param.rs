use crate::element::Element;
use crate::tensor::Tensor;

/// A named trainable leaf.
#[derive(Clone, Debug)]
pub struct Parameter<T: Element = f32> {
    name: String,
    value: Tensor<T>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            value: value.to_leaf(),
        }
    }

    /// Dot-separated path, e.g. `backbone.enc1.block0.mdta.alpha`.
    pub fn name(&self) -> &str {
        &self.name
    }

    /// The graph leaf to use in forward passes.
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.value.grad()
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad()
    }

    /// Replaces the value with a fresh leaf. Panics on a shape change.
    pub fn set_data(&mut self, data: Vec<T>) {
        let shape = self.value.shape().to_vec();
        self.value = Tensor::from_vec(data, &shape)
            .unwrap_or_else(|e| panic!("parameter {}: {e}", self.name))
            .to_leaf();
    }
}

/// Anything that owns parameters. Visiting order is the declaration order
/// and must be deterministic.
pub trait Module<T: Element> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    /// Total scalar count over all parameters.
    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    fn zero_grad(&self) {
        self.visit(&mut |p| p.zero_grad());
    }
}

impl<T: Element> Module<T> for Parameter<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(self)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(self)
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.iter().for_each(|m| m.visit(f))
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.iter_mut().for_each(|m| m.visit_mut(f))
    }
}

impl<T: Element, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        if let Some(m) = self {
            m.visit(f)
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        if let Some(m) = self {
            m.visit_mut(f)
        }
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::Element> $crate::Module<T> for $ty<T> {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::Parameter<T>)) {
                $( $crate::Module::<T>::visit(&self.$field, f); )*
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut $crate::Parameter<T>)) {
                $( $crate::Module::<T>::visit_mut(&mut self.$field, f); )*
            }
        }
    };
}
