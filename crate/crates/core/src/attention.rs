//! Speaker relation masks and masked multi-head attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    /// Every pair of utterances interacts.
    Global,
    /// Only pairs spoken by the same speaker.
    Intra,
    /// Only pairs spoken by different speakers.
    Inter,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [RelationKind::Global, RelationKind::Intra, RelationKind::Inter];
}

/// `n x n` additive relation matrix with entries in `{0, -inf}`, stored as
/// the set of allowed (zero) entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMask {
    kind: RelationKind,
    n: usize,
    allowed: Vec<bool>,
}

impl RelationMask {
    pub fn build<S: AsRef<str>>(kind: RelationKind, speakers: &[S]) -> Result<Self> {
        let n = speakers.len();
        if n == 0 {
            return Err(Error::Empty("relation mask over no utterances"));
        }
        let mut allowed = Vec::with_capacity(n * n);
        for a in speakers {
            for b in speakers {
                let same = a.as_ref() == b.as_ref();
                allowed.push(match kind {
                    RelationKind::Global => true,
                    RelationKind::Intra => same,
                    RelationKind::Inter => !same,
                });
            }
        }
        Ok(Self { kind, n, allowed })
    }

    /// Mask that lets each position attend only to itself.
    pub fn diagonal(n: usize) -> Self {
        let allowed = (0..n * n).map(|x| x / n == x % n).collect();
        Self {
            kind: RelationKind::Intra,
            n,
            allowed,
        }
    }

    pub fn kind(&self) -> RelationKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn is_allowed(&self, i: usize, k: usize) -> bool {
        self.allowed[i * self.n + k]
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    /// Entry `M[i][k]`: `0.0` or `f64::NEG_INFINITY`.
    pub fn entry(&self, i: usize, k: usize) -> f64 {
        if self.is_allowed(i, k) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    /// The mask with `-inf` realised as a finite large negative constant.
    pub fn additive<T: Scalar>(&self) -> Matrix<T> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::zero() } else { T::mask_value() })
            .collect();
        Matrix::from_vec(self.n, self.n, data).expect("n*n entries")
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|k| self.is_allowed(i, k) == self.is_allowed(k, i)))
    }
}

/// `softmax(q kᵀ / sqrt(d_t) + M) v` on the graph. `allowed` is the
/// row-major mask over `(rows of q) x (rows of k)`; `None` means no masking.
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    allowed: Option<&[bool]>,
) -> Result<Var> {
    let (nq, dq) = g.value(q).shape();
    let (nk, dk) = g.value(k).shape();
    let nv = g.value(v).rows();
    if dq != dk || nk != nv {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            (nq, dq),
            (nk, dk),
            g.value(v).shape()
        )));
    }
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, T::one() / T::of(dq as f64).sqrt());
    let weights = match allowed {
        Some(m) => g.masked_softmax(scaled, m)?,
        None => g.softmax(scaled),
    };
    g.matmul(weights, v)
}

/// Attention weights and output for plain matrices.
pub fn masked_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &RelationMask,
) -> Result<Matrix<T>> {
    if mask.size() != q.rows() || mask.size() != k.rows() {
        return Err(Error::Shape(format!(
            "mask of size {} for {} queries and {} keys",
            mask.size(),
            q.rows(),
            k.rows()
        )));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = attend(&mut g, qv, kv, vv, Some(mask.allowed()))?;
    Ok(g.value(out).clone())
}

/// Post-softmax attention weights, exposed for inspection.
pub fn attention_weights<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    mask: Option<&[bool]>,
) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let kt = g.transpose(kv);
    let scores = g.matmul(qv, kt)?;
    let scaled = g.scale(scores, T::one() / T::of(q.cols() as f64).sqrt());
    let w = match mask {
        Some(m) => g.masked_softmax(scaled, m)?,
        None => g.softmax(scaled),
    };
    Ok(g.value(w).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

/// Per-head projections `d -> d_t` and the output projection `H*d_t -> d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub heads: Vec<HeadWeights<T>>,
    pub w_o: Matrix<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, d_t: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d_t == 0 || d == 0 {
            return Err(Error::Config(format!(
                "attention needs positive dims, got d={d}, H={heads}, d_t={d_t}"
            )));
        }
        let heads = (0..heads)
            .map(|_| HeadWeights {
                w_q: Matrix::uniform_fan_in(d, d_t, rng),
                w_k: Matrix::uniform_fan_in(d, d_t, rng),
                w_v: Matrix::uniform_fan_in(d, d_t, rng),
            })
            .collect::<Vec<_>>();
        let w_o = Matrix::uniform_fan_in(heads.len() * d_t, d, rng);
        Ok(Self { heads, w_o })
    }

    pub fn model_dim(&self) -> usize {
        self.w_o.cols()
    }

    fn validate(&self) -> Result<()> {
        let first = self.heads.first().ok_or(Error::Config("attention with zero heads".into()))?;
        let (d, d_t) = first.w_q.shape();
        for h in &self.heads {
            for w in [&h.w_q, &h.w_k, &h.w_v] {
                if w.shape() != (d, d_t) {
                    return Err(Error::Shape(format!("head weight {:?}, expected {:?}", w.shape(), (d, d_t))));
                }
            }
        }
        if self.w_o.shape() != (self.heads.len() * d_t, d) {
            return Err(Error::Shape(format!(
                "output projection {:?}, expected {:?}",
                self.w_o.shape(),
                (self.heads.len() * d_t, d)
            )));
        }
        Ok(())
    }

    /// Stores the weights under `{prefix}.head{t}.w_q` etc. and `{prefix}.w_o`.
    pub fn insert_into(&self, store: &mut ParamStore<T>, prefix: &str) {
        for (t, h) in self.heads.iter().enumerate() {
            store.insert(format!("{prefix}.head{t}.w_q"), h.w_q.clone());
            store.insert(format!("{prefix}.head{t}.w_k"), h.w_k.clone());
            store.insert(format!("{prefix}.head{t}.w_v"), h.w_v.clone());
        }
        store.insert(format!("{prefix}.w_o"), self.w_o.clone());
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> AttentionVars {
        let mut leaf = |m: &Matrix<T>| if trainable { g.param(m.clone()) } else { g.constant(m.clone()) };
        let heads = self
            .heads
            .iter()
            .map(|h| (leaf(&h.w_q), leaf(&h.w_k), leaf(&h.w_v)))
            .collect();
        let w_o = leaf(&self.w_o);
        AttentionVars { heads, w_o }
    }
}

/// Graph handles for one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub heads: Vec<(Var, Var, Var)>,
    pub w_o: Var,
}

impl AttentionVars {
    pub fn from_bound(bound: &Bound, prefix: &str, n_heads: usize) -> Result<Self> {
        let heads = (0..n_heads)
            .map(|t| {
                Ok((
                    bound.var(&format!("{prefix}.head{t}.w_q"))?,
                    bound.var(&format!("{prefix}.head{t}.w_k"))?,
                    bound.var(&format!("{prefix}.head{t}.w_v"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            w_o: bound.var(&format!("{prefix}.w_o"))?,
        })
    }
}

/// `concat_t(Attn(h W_q^t, h W_k^t, h W_v^t, M)) W_o` on the graph.
pub fn multi_head_in<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    allowed: Option<&[bool]>,
    vars: &AttentionVars,
) -> Result<Var> {
    let mut heads = Vec::with_capacity(vars.heads.len());
    for &(wq, wk, wv) in &vars.heads {
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        heads.push(attend(g, q, k, v, allowed)?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, vars.w_o)
}

pub fn multi_head<T: Scalar>(
    h_utt: &Matrix<T>,
    mask: &RelationMask,
    params: &AttentionParams<T>,
) -> Result<Matrix<T>> {
    params.validate()?;
    if h_utt.cols() != params.model_dim() {
        return Err(Error::Shape(format!(
            "utterance vectors of width {} for attention over d={}",
            h_utt.cols(),
            params.model_dim()
        )));
    }
    if mask.size() != h_utt.rows() {
        return Err(Error::Shape(format!(
            "mask of size {} for {} utterances",
            mask.size(),
            h_utt.rows()
        )));
    }
    let mut g = Graph::new();
    let h = g.constant(h_utt.clone());
    let vars = params.bind(&mut g, false);
    let out = multi_head_in(&mut g, h, Some(mask.allowed()), &vars)?;
    Ok(g.value(out).clone())
}
