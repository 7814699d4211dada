use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Param, Tensor};

/// Named tensors keyed by parameter name, e.g. `lm.layers.3.in_proj.weight`.
pub type TensorMap = BTreeMap<String, Tensor>;

/// Anything that owns learned parameters.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value().numel()).sum()
    }

    fn to_map(&self) -> TensorMap {
        self.params()
            .into_iter()
            .map(|p| (p.name().to_string(), p.value().clone()))
            .collect()
    }

    /// Overwrites every parameter from `map`, requiring matching shapes.
    fn assign(&mut self, map: &TensorMap) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match map.get(p.name()) {
                None => err = Some(Error::Format(format!("missing tensor {}", p.name()))),
                Some(t) if t.shape() != p.value().shape() => {
                    err = Some(Error::Format(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        p.name(),
                        t.shape(),
                        p.value().shape()
                    )))
                }
                Some(t) => p.set(t.clone()),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for m in self {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for m in self {
            m.visit_mut(f);
        }
    }
}

impl<M: Module> Module for Option<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

impl Module for Param {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(self);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(self);
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::module::Module for $ty {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::numerics::Param)) {
                $( $crate::module::Module::visit(&self.$field, f); )*
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut $crate::numerics::Param)) {
                $( $crate::module::Module::visit_mut(&mut self.$field, f); )*
            }
        }
    };
}
