use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a freshly built parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Zero-mean normal with standard deviation `sqrt(gain / fan_in)`.
    FanIn { fan_in: usize, gain: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered registry of named parameter tensors. A parameter is trainable iff
/// its tensor has `requires_grad` set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn initialize(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        for spec in specs {
            let data = match spec.init {
                Init::Zeros => vec![0.0; spec.len()],
                Init::FanIn { fan_in, gain } => {
                    let std = (gain / fan_in.max(1) as f32).sqrt();
                    let normal = Normal::new(0.0f32, std)
                        .map_err(|e| Error::Config(format!("bad init for {}: {e}", spec.name)))?;
                    (0..spec.len()).map(|_| normal.sample(rng)).collect()
                }
            };
            store.insert(&spec.name, Tensor::new(spec.shape.clone(), data)?.with_grad())?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.tensors.values().filter(|t| t.requires_grad).map(Tensor::len).sum()
    }

    /// Sets the trainable flag on every parameter whose name matches the glob
    /// `pattern` (`*` matches any run of characters). Returns the match count.
    pub fn set_trainable(&mut self, pattern: &str, trainable: bool) -> Result<usize> {
        let mut hits = 0;
        for (name, t) in self.tensors.iter_mut() {
            if glob_match(pattern, name) {
                t.requires_grad = trainable;
                if !trainable {
                    t.grad = None;
                }
                hits += 1;
            }
        }
        if hits == 0 {
            return Err(Error::Config(format!("pattern {pattern:?} matches no parameter")));
        }
        Ok(hits)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// 64-bit FNV-1a digest over names and raw value bits, for cheap
    /// "did anything change" comparisons.
    pub fn fingerprint(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.tensors.iter().filter(|(n, _)| filter(n)) {
            feed(name.as_bytes());
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Minimal glob: `*` matches any (possibly empty) substring.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_semantics() {
        assert!(glob_match("base.*", "base.0.enc0.conv1.weight"));
        assert!(!glob_match("base.*", "meta.conv0.weight"));
        assert!(glob_match("*", ""));
        assert!(glob_match("*.bias", "enc0.conv1.bias"));
        assert!(glob_match("enc*conv2*", "enc1.conv2.weight"));
        assert!(!glob_match("enc0", "enc0.conv1.weight"));
        assert!(glob_match("enc0.conv1.weight", "enc0.conv1.weight"));
    }

    #[test]
    fn set_trainable_requires_a_match() {
        let specs = vec![ParamSpec {
            name: "a.weight".into(),
            shape: vec![2],
            init: Init::Zeros,
        }];
        let mut store = ParamStore::initialize(&specs, &mut seeded_rng(0)).unwrap();
        assert!(store.set_trainable("b.*", false).is_err());
        assert_eq!(store.set_trainable("a.*", false).unwrap(), 1);
        assert_eq!(store.num_trainable_values(), 0);
    }

    #[test]
    fn init_is_seeded() {
        let specs = vec![ParamSpec {
            name: "w".into(),
            shape: vec![4, 4],
            init: Init::FanIn { fan_in: 4, gain: 2.0 },
        }];
        let a = ParamStore::initialize(&specs, &mut seeded_rng(7)).unwrap();
        let b = ParamStore::initialize(&specs, &mut seeded_rng(7)).unwrap();
        let c = ParamStore::initialize(&specs, &mut seeded_rng(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(|_| true), c.fingerprint(|_| true));
    }
}
