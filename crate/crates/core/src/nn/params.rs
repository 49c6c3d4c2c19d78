//! Flat, ordered parameter bank.
//!
//! Every tensor lives in one contiguous buffer in declaration order, so the
//! optimizer, the moving average and the checkpoint writer all work on a
//! single slice and the order is the same wherever the store is rebuilt.

use std::sync::Arc;

use rand::Rng;

use super::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn offset(&self) -> usize {
        self.offset
    }
}

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Fixed values, e.g. FiLM biases that start at unit scale.
    Values(Vec<f64>),
}

/// Collects parameter declarations and their initial values.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    inits: Vec<Init>,
    total: usize,
}

impl ParamBuilder {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let len = shape.iter().product();
        if let Init::Values(v) = &init {
            assert_eq!(v.len(), len, "initial values for parameter");
        }
        self.specs.push(ParamSpec { name: name.into(), shape: shape.to_vec(), offset: self.total, len });
        self.inits.push(init);
        self.total += len;
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> Arc<Vec<ParamSpec>> {
        Arc::new(self.specs.clone())
    }

    pub fn initialize<R: Real, G: Rng + ?Sized>(&self, rng: &mut G) -> ParameterStore<R> {
        let mut data = Vec::with_capacity(self.total);
        for (spec, init) in self.specs.iter().zip(&self.inits) {
            match init {
                Init::Zeros => data.extend(std::iter::repeat_n(R::zero(), spec.len)),
                Init::Uniform(bound) => {
                    data.extend((0..spec.len).map(|_| R::lit(rng.random_range(-bound..=*bound))))
                }
                Init::Values(v) => data.extend(v.iter().map(|&x| R::lit(x))),
            }
        }
        ParameterStore { specs: self.specs(), data }
    }
}

/// Named tensors over one flat buffer. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<R> {
    specs: Arc<Vec<ParamSpec>>,
    data: Vec<R>,
}

pub type Gradients<R> = ParameterStore<R>;

impl<R: Real> ParameterStore<R> {
    pub fn from_parts(specs: Arc<Vec<ParamSpec>>, data: Vec<R>) -> Self {
        let total: usize = specs.iter().map(|s| s.len).sum();
        assert_eq!(total, data.len(), "parameter buffer length");
        Self { specs, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self { specs: self.specs.clone(), data: vec![R::zero(); self.data.len()] }
    }

    pub fn specs(&self) -> &Arc<Vec<ParamSpec>> {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor_count(&self) -> usize {
        self.specs.len()
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &[R] {
        let s = &self.specs[id.0];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [R] {
        let s = &self.specs[id.0];
        &mut self.data[s.offset..s.offset + s.len]
    }

    /// Two distinct tensors borrowed mutably at once.
    pub fn get_pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [R], &mut [R]) {
        assert_ne!(a, b);
        let (sa, sb) = (self.specs[a.0].clone(), self.specs[b.0].clone());
        if sa.offset < sb.offset {
            let (lo, hi) = self.data.split_at_mut(sb.offset);
            (&mut lo[sa.offset..sa.offset + sa.len], &mut hi[..sb.len])
        } else {
            let (lo, hi) = self.data.split_at_mut(sa.offset);
            (&mut hi[..sa.len], &mut lo[sb.offset..sb.offset + sb.len])
        }
    }

    pub fn flat(&self) -> &[R] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn cast<S: Real>(&self) -> ParameterStore<S> {
        ParameterStore {
            specs: self.specs.clone(),
            data: self.data.iter().map(|v| S::lit(v.to_f64().unwrap())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: R) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.specs
            .iter()
            .find(|s| self.data[s.offset..s.offset + s.len].iter().any(|v| !v.is_finite()))
            .map(|s| s.name.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layout_and_lookup() {
        let mut b = ParamBuilder::default();
        let w = b.add("w", &[2, 3], Init::Uniform(0.5));
        let z = b.add("z", &[4], Init::Zeros);
        let v = b.add("v", &[2], Init::Values(vec![1.0, 0.0]));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p: ParameterStore<f64> = b.initialize(&mut rng);
        assert_eq!(p.len(), 12);
        assert_eq!(p.get(w).len(), 6);
        assert!(p.get(w).iter().all(|x| x.abs() <= 0.5));
        assert_eq!(p.get(z), &[0.0; 4]);
        assert_eq!(p.get(v), &[1.0, 0.0]);
        assert_eq!(p.id("z"), Some(z));
        let (a, c) = p.get_pair_mut(v, w);
        a[0] = 9.0;
        c[0] = 8.0;
        assert_eq!(p.get(v)[0], 9.0);
        assert_eq!(p.get(w)[0], 8.0);
        assert!(p.first_non_finite().is_none());
        p.get_mut(z)[1] = f64::NAN;
        assert_eq!(p.first_non_finite(), Some("z"));
    }
}
