//! Per-instance identity embeddings `g_i = MLP([text(c_i), fourier(s_i), fourier(ID_i)])`.
//!
//! The category text feature comes from a deterministic pseudo-encoder: a
//! seeded stream of standard normals, normalized to unit length. The MLP is
//! two affine layers with `x * sigmoid(x)` between them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{Matrix, TokenMatrix};
use crate::error::{Error, Result};
use crate::rng::{fnv1a64, CounterRng};
use crate::scalar::Real;
use crate::scene::{Instance, Scene};

pub const DEFAULT_FREQUENCIES: usize = 8;
pub const DEFAULT_TEXT_DIM: usize = 32;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FourierMap {
    pub num_frequencies: usize,
}

impl FourierMap {
    pub fn new(num_frequencies: usize) -> Result<Self> {
        if num_frequencies == 0 {
            return Err(Error::validation("num_frequencies", "must be >= 1"));
        }
        Ok(Self { num_frequencies })
    }

    pub fn output_dim(&self, inputs: usize) -> usize {
        2 * self.num_frequencies * inputs
    }

    /// Per component: `sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)`.
    pub fn apply<T: Real>(&self, x: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.output_dim(x.len()));
        for &xj in x {
            let mut freq = T::PI();
            for _ in 0..self.num_frequencies {
                let (s, c) = (freq * xj).sin_cos();
                out.push(s);
                out.push(c);
                freq = freq + freq;
            }
        }
        out
    }
}

pub fn fourier<T: Real>(x: &[T], num_frequencies: usize) -> Vec<T> {
    FourierMap { num_frequencies }.apply(x)
}

/// Unit-norm pseudo text feature for a category label.
///
/// Seeds a [`CounterRng`] with FNV-1a over `seed` (little-endian) followed by
/// the UTF-8 label, draws `d_text` standard normals and normalizes.
pub fn pseudo_text_encode<T: Real>(category: &str, d_text: usize, seed: u64) -> Result<Vec<T>> {
    if category.is_empty() {
        return Err(Error::validation("category", "must be nonempty"));
    }
    if d_text == 0 {
        return Err(Error::validation("d_text", "must be >= 1"));
    }
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(category.as_bytes());
    let mut rng = CounterRng::new(fnv1a64(&bytes));
    let raw: Vec<f64> = (0..d_text).map(|_| rng.normal()).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(raw.into_iter().map(|v| T::lit(v / norm)).collect())
}

#[inline]
fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub seed: u64,
    pub num_frequencies: usize,
    pub d_text: usize,
    pub hidden: usize,
    pub d_model: usize,
    /// `input_dim x hidden`.
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    /// `hidden x d_model`.
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Real> MlpParams<T> {
    pub fn input_dim_for(d_text: usize, num_frequencies: usize) -> usize {
        d_text + 2 * num_frequencies * 3 + 2 * num_frequencies
    }

    pub fn input_dim(&self) -> usize {
        Self::input_dim_for(self.d_text, self.num_frequencies)
    }

    /// Weights and biases drawn from `N(0, 1/fan_in)`.
    pub fn seeded(seed: u64, num_frequencies: usize, d_text: usize, hidden: usize, d_model: usize) -> Result<Self> {
        FourierMap::new(num_frequencies)?;
        if d_text == 0 || hidden == 0 || d_model == 0 {
            return Err(Error::validation("mlp dims", "d_text, hidden and d_model must be >= 1"));
        }
        let input = Self::input_dim_for(d_text, num_frequencies);
        let mut rng = CounterRng::new(seed).split(0x4d4c50);
        let s1 = 1.0 / (input as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::random_normal(input, hidden, s1, &mut rng);
        let b1 = (0..hidden).map(|_| T::lit(rng.normal() * s1)).collect();
        let w2 = Matrix::random_normal(hidden, d_model, s2, &mut rng);
        let b2 = (0..d_model).map(|_| T::lit(rng.normal() * s2)).collect();
        let p = Self {
            seed,
            num_frequencies,
            d_text,
            hidden,
            d_model,
            w1,
            b1,
            w2,
            b2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(seed: u64, num_frequencies: usize, d_text: usize, hidden: usize, d_model: usize) -> Self {
        Self {
            seed,
            num_frequencies,
            d_text,
            hidden,
            d_model,
            w1: Matrix::zeros(Self::input_dim_for(d_text, num_frequencies), hidden),
            b1: vec![T::zero(); hidden],
            w2: Matrix::zeros(hidden, d_model),
            b2: vec![T::zero(); d_model],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let input = self.input_dim();
        let ok = self.w1.rows == input
            && self.w1.cols == self.hidden
            && self.b1.len() == self.hidden
            && self.w2.rows == self.hidden
            && self.w2.cols == self.d_model
            && self.b2.len() == self.d_model;
        if !ok {
            return Err(Error::Shape(format!(
                "mlp layers do not chain {input} -> {} -> {}",
                self.hidden, self.d_model
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!("mlp input has {} values, expected {}", x.len(), self.input_dim())));
        }
        let h: Vec<T> = (0..self.hidden)
            .map(|j| silu((0..x.len()).fold(self.b1[j], |a, i| a + x[i] * self.w1.get(i, j))))
            .collect();
        Ok((0..self.d_model)
            .map(|j| (0..self.hidden).fold(self.b2[j], |a, i| a + h[i] * self.w2.get(i, j)))
            .collect())
    }

    pub fn to_json(&self) -> String {
        let text = |v: &T| format!("{v:?}");
        let mat = |m: &Matrix<T>| -> Vec<Vec<String>> {
            (0..m.rows).map(|r| m.row(r).iter().map(text).collect()).collect()
        };
        let file = ParamsFile {
            seed: self.seed,
            num_frequencies: self.num_frequencies,
            d_text: self.d_text,
            hidden: self.hidden,
            d_model: self.d_model,
            activation: "silu".into(),
            w1: mat(&self.w1),
            b1: self.b1.iter().map(text).collect(),
            w2: mat(&self.w2),
            b2: self.b2.iter().map(text).collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("infallible");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamsFile = serde_json::from_str(text).map_err(|e| Error::parse("params file", e.to_string()))?;
        if file.activation != "silu" {
            return Err(Error::parse("params.activation", format!("unsupported activation {:?}", file.activation)));
        }
        let real = |s: &str, field: String| -> Result<T> {
            let v: T = s.trim().parse().map_err(|_| Error::parse(field.clone(), format!("{s:?} is not a real")))?;
            if !v.is_finite() {
                return Err(Error::parse(field, "not finite"));
            }
            Ok(v)
        };
        let vec = |v: &[String], name: &str| -> Result<Vec<T>> {
            v.iter().enumerate().map(|(i, s)| real(s, format!("params.{name}[{i}]"))).collect()
        };
        let mat = |m: &[Vec<String>], name: &str| -> Result<Matrix<T>> {
            let cols = m.first().map_or(0, Vec::len);
            let mut data = Vec::with_capacity(m.len() * cols);
            for (r, row) in m.iter().enumerate() {
                if row.len() != cols {
                    return Err(Error::parse(format!("params.{name}[{r}]"), "ragged matrix"));
                }
                for (c, s) in row.iter().enumerate() {
                    data.push(real(s, format!("params.{name}[{r}][{c}]"))?);
                }
            }
            Matrix::from_vec(m.len(), cols, data)
        };
        let p = Self {
            seed: file.seed,
            num_frequencies: file.num_frequencies,
            d_text: file.d_text,
            hidden: file.hidden,
            d_model: file.d_model,
            w1: mat(&file.w1, "w1")?,
            b1: vec(&file.b1, "b1")?,
            w2: mat(&file.w2, "w2")?,
            b2: vec(&file.b2, "b2")?,
        };
        FourierMap::new(p.num_frequencies)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    seed: u64,
    num_frequencies: usize,
    d_text: usize,
    hidden: usize,
    d_model: usize,
    activation: String,
    w1: Vec<Vec<String>>,
    b1: Vec<String>,
    w2: Vec<Vec<String>>,
    b2: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding<T> {
    pub instance_id: u64,
    pub vector: Vec<T>,
    pub category: String,
    pub size: [f64; 3],
}

/// MLP input `[text(c), fourier(size), fourier(id / id_norm)]`.
pub fn identity_features<T: Real>(
    inst: &Instance,
    d_text: usize,
    text_seed: u64,
    fmap: FourierMap,
    id_norm: f64,
) -> Result<Vec<T>> {
    if !(id_norm.is_finite() && id_norm > 0.0) {
        return Err(Error::validation("id_norm", "must be finite and > 0"));
    }
    let mut x = pseudo_text_encode::<T>(&inst.category, d_text, text_seed)?;
    let size: Vec<T> = inst.size.iter().map(|&v| T::lit(v)).collect();
    x.extend(fmap.apply(&size));
    x.extend(fmap.apply(&[T::lit(inst.tracking_id as f64 / id_norm)]));
    Ok(x)
}

pub fn embed_instance<T: Real>(
    inst: &Instance,
    params: &MlpParams<T>,
    fmap: FourierMap,
    id_norm: f64,
) -> Result<IdentityEmbedding<T>> {
    if fmap.num_frequencies != params.num_frequencies {
        return Err(Error::Shape(format!(
            "fourier map has {} frequencies, params expect {}",
            fmap.num_frequencies, params.num_frequencies
        )));
    }
    let x = identity_features(inst, params.d_text, params.seed, fmap, id_norm)?;
    Ok(IdentityEmbedding {
        instance_id: inst.tracking_id,
        vector: params.forward(&x)?,
        category: inst.category.clone(),
        size: [inst.size.x, inst.size.y, inst.size.z],
    })
}

/// Default normalizer: largest tracking ID in the scene plus one.
pub fn default_id_norm(scene: &Scene) -> f64 {
    scene.instances.iter().map(|i| i.tracking_id).max().map_or(1.0, |m| m as f64 + 1.0)
}

/// One embedding per scene instance, in ascending tracking-ID order.
pub fn build_condition_set<T: Real>(scene: &Scene, params: &MlpParams<T>) -> Result<Vec<IdentityEmbedding<T>>> {
    let fmap = FourierMap::new(params.num_frequencies)?;
    let norm = default_id_norm(scene);
    scene
        .instance_order()
        .into_iter()
        .map(|id| embed_instance(scene.instance(id).expect("id from scene"), params, fmap, norm))
        .collect()
}

pub fn condition_tokens<T: Real>(set: &[IdentityEmbedding<T>], d_model: usize) -> Result<TokenMatrix<T>> {
    let mut data = Vec::with_capacity(set.len() * d_model);
    for e in set {
        if e.vector.len() != d_model {
            return Err(Error::Shape(format!("embedding of {} has {} dims", e.instance_id, e.vector.len())));
        }
        data.extend_from_slice(&e.vector);
    }
    Ok(TokenMatrix::condition(Matrix::from_vec(set.len(), d_model, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, GeneratorSpec, Vec3};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn inst(id: u64, cat: &str) -> Instance {
        Instance {
            tracking_id: id,
            category: cat.into(),
            size: Vec3::new(4.5, 1.9, 1.6),
            poses: BTreeMap::new(),
        }
    }

    #[test]
    fn fourier_examples() {
        assert_eq!(fourier(&[0.0f64], 2), vec![0.0, 1.0, 0.0, 1.0]);
        let v = fourier(&[1.0f64], 1);
        assert!(v[0].abs() < 1e-15 && v[1] == -1.0);
        let v = fourier(&[0.25f64, 0.5], 2);
        let pi = std::f64::consts::PI;
        let direct = [
            (pi * 0.25).sin(),
            (pi * 0.25).cos(),
            (2.0 * pi * 0.25).sin(),
            (2.0 * pi * 0.25).cos(),
            (pi * 0.5).sin(),
            (pi * 0.5).cos(),
            (2.0 * pi * 0.5).sin(),
            (2.0 * pi * 0.5).cos(),
        ];
        assert_eq!(v.len(), 8);
        for (a, b) in v.iter().zip(direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn text_encoder_properties() {
        let a: Vec<f64> = pseudo_text_encode("car", 32, 0).unwrap();
        let b: Vec<f64> = pseudo_text_encode("car", 32, 0).unwrap();
        assert_eq!(a, b);
        let bus: Vec<f64> = pseudo_text_encode("bus", 32, 0).unwrap();
        assert!((bus.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        let truck: Vec<f64> = pseudo_text_encode("truck", 32, 0).unwrap();
        let cos: f64 = a.iter().zip(&truck).map(|(x, y)| x * y).sum();
        assert!(cos < 0.999, "{cos}");
        assert!(pseudo_text_encode::<f64>("", 8, 0).is_err());
    }

    #[test]
    fn zero_mlp_annihilates() {
        let p = MlpParams::<f64>::zeros(0, 4, 8, 16, 12);
        let e = embed_instance(&inst(3, "car"), &p, FourierMap::new(4).unwrap(), 10.0).unwrap();
        assert_eq!(e.vector, vec![0.0; 12]);
    }

    #[test]
    fn concatenation_length() {
        for l in 1..5 {
            let x: Vec<f64> = identity_features(&inst(2, "bus"), 16, 0, FourierMap::new(l).unwrap(), 4.0).unwrap();
            assert_eq!(x.len(), 16 + 6 * l + 2 * l);
        }
    }

    #[test]
    fn tracking_id_changes_embedding() {
        let p = MlpParams::<f64>::seeded(11, 8, 32, 64, 16).unwrap();
        let f = FourierMap::new(8).unwrap();
        let a = embed_instance(&inst(3, "car"), &p, f, 10.0).unwrap();
        let b = embed_instance(&inst(4, "car"), &p, f, 10.0).unwrap();
        assert_ne!(a.vector, b.vector);
        let a2 = embed_instance(&inst(3, "car"), &p, f, 10.0).unwrap();
        assert_eq!(a.vector, a2.vector);
        assert!(embed_instance(&inst(3, "car"), &p, FourierMap::new(4).unwrap(), 10.0).is_err());
    }

    #[test]
    fn condition_set_order_and_params_round_trip() {
        let mut s = generate_synthetic_scene(7, &GeneratorSpec::default()).unwrap();
        let ids = [7, 2, 5];
        for (i, id) in ids.iter().enumerate() {
            s.instances[i].tracking_id = *id;
        }
        s.instances.truncate(3);
        let p = MlpParams::<f64>::seeded(7, 8, 32, 64, 16).unwrap();
        let set = build_condition_set(&s, &p).unwrap();
        assert_eq!(set.iter().map(|e| e.instance_id).collect::<Vec<_>>(), vec![2, 5, 7]);
        let back = MlpParams::<f64>::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert_eq!(build_condition_set(&s, &back).unwrap(), set);
        s.instances.clear();
        assert!(build_condition_set(&s, &p).unwrap().is_empty());
    }

    #[test]
    fn params_f32_round_trip() {
        let p = MlpParams::<f32>::seeded(3, 2, 4, 5, 6).unwrap();
        assert_eq!(MlpParams::<f32>::from_json(&p.to_json()).unwrap(), p);
        assert!(MlpParams::<f64>::from_json(&p.to_json().replace("silu", "relu")).is_err());
    }

    proptest! {
        #[test]
        fn fourier_is_bounded(x in proptest::collection::vec(-1e3f64..1e3, 1..6), l in 1usize..10) {
            let v = fourier(&x, l);
            prop_assert_eq!(v.len(), 2 * l * x.len());
            prop_assert!(v.iter().all(|c| (-1.0..=1.0).contains(c)));
        }
    }
}
