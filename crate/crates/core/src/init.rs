//! Named parameter construction.

use std::cell::RefCell;
use std::rc::Rc;

use dpm_tensor::{Element, Parameter, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// How convolution weights are drawn. Norm scales and attention
/// temperatures always start at one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncatedNormal { std: f64 },
    /// Every convolution weight zero. Sub-layers then contribute nothing and
    /// every residual path reduces to the identity.
    ZeroWeights,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::TruncatedNormal { std: 0.02 }
    }
}

/// Hands out parameters under a dot-separated path, drawing from one
/// seeded stream so construction order fixes every value.
#[derive(Clone)]
pub struct ParamInit {
    rng: Rc<RefCell<ChaCha8Rng>>,
    scheme: InitScheme,
    prefix: String,
}

impl ParamInit {
    pub fn new(seed: u64, scheme: InitScheme) -> Self {
        ParamInit {
            rng: Rc::new(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
            scheme,
            prefix: String::new(),
        }
    }

    /// Child scope `prefix.name`.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        ParamInit {
            rng: Rc::clone(&self.rng),
            scheme: self.scheme,
            prefix: if self.prefix.is_empty() {
                name.to_string()
            } else {
                format!("{}.{name}", self.prefix)
            },
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Convolution weight `[cout, cin/groups, k, k]`, no bias.
    pub fn conv<T: Element>(
        &self,
        name: &str,
        cout: usize,
        cin_per_group: usize,
        k: usize,
    ) -> Parameter<T> {
        let shape = [cout, cin_per_group, k, k];
        let n = cout * cin_per_group * k * k;
        let data = match self.scheme {
            InitScheme::ZeroWeights => vec![T::zero(); n],
            InitScheme::TruncatedNormal { std } => {
                let mut rng = self.rng.borrow_mut();
                (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        if z.abs() <= 2.0 {
                            break T::from_f64(z * std);
                        }
                    })
                    .collect()
            }
        };
        Parameter::new(
            self.path(name),
            Tensor::from_vec(data, &shape).expect("shape"),
        )
    }

    pub fn ones<T: Element>(&self, name: &str, shape: &[usize]) -> Parameter<T> {
        Parameter::new(self.path(name), Tensor::ones(shape))
    }
}
