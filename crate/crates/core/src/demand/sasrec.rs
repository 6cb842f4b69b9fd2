//! Single-block self-attentive sequential recommender with per-file sigmoid
//! scores and a hand-written reverse pass.
//!
//! Token `0` is the virtual padding file; catalog file `f` is token `f + 1`.
//! Row-vector convention throughout: an embedding is a length-`d` row and a
//! projection `W` maps `e` to `e·W`.

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::DemandError;
use crate::scalar::{sigmoid, Scalar};

/// Most recent `seq_len` requests of one vehicle, left-padded with the virtual file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestHistory {
    tokens: Vec<u32>,
    file_count: usize,
}

impl RequestHistory {
    /// `tokens` are already in token space (0 = padding, `f + 1` = file `f`).
    pub fn new(tokens: Vec<u32>, file_count: usize) -> Result<Self, DemandError> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize > file_count) {
            return Err(DemandError::FileOutOfRange { file: t as usize - 1, file_count });
        }
        Ok(Self { tokens, file_count })
    }

    /// Keeps the last `seq_len` catalog ids and pads on the left.
    pub fn from_requests(requests: &[usize], seq_len: usize, file_count: usize) -> Result<Self, DemandError> {
        if let Some(&f) = requests.iter().find(|&&f| f >= file_count) {
            return Err(DemandError::FileOutOfRange { file: f, file_count });
        }
        let tail = &requests[requests.len().saturating_sub(seq_len)..];
        let mut tokens = vec![0u32; seq_len - tail.len()];
        tokens.extend(tail.iter().map(|&f| f as u32 + 1));
        Ok(Self { tokens, file_count })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.iter().all(|&t| t == 0)
    }

    pub fn file_count(&self) -> usize {
        self.file_count
    }

    /// Catalog ids of the next `ahead` requests after each of the first `positions` slots,
    /// padding removed and duplicates dropped.
    pub fn next_targets(&self, positions: usize, ahead: usize) -> Vec<Vec<usize>> {
        (0..positions)
            .map(|i| {
                let mut t: Vec<usize> = self.tokens[(i + 1).min(self.len())..(i + 1 + ahead).min(self.len())]
                    .iter()
                    .filter(|&&t| t != 0)
                    .map(|&t| t as usize - 1)
                    .collect();
                t.sort_unstable();
                t.dedup();
                t
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SasrecShape {
    pub dim: usize,
    pub files: usize,
    /// Input positions, `I - I'`.
    pub positions: usize,
}

impl SasrecShape {
    fn len(&self) -> usize {
        let d = self.dim;
        (self.files + 1) * d + self.positions * d + 5 * d * d + 2 * d
    }

    // Block offsets: M, P, Wq, Wk, Wv, W1, W2, b1, b2.
    fn offsets(&self) -> [usize; 10] {
        let d = self.dim;
        let sizes = [(self.files + 1) * d, self.positions * d, d * d, d * d, d * d, d * d, d * d, d, d];
        let mut o = [0usize; 10];
        for (i, s) in sizes.iter().enumerate() {
            o[i + 1] = o[i] + s;
        }
        o
    }
}

/// Model parameters in one flat buffer so they can be averaged and shipped
/// as a single vector.
///
/// Layout, all row-major: `M` stored as (F+1)×d (row `t` is the embedding of
/// token `t`), `P` as (I−I')×d, then `W^Q`, `W^K`, `W^V`, `W₁`, `W₂` (d×d),
/// then `b₁`, `b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct SasrecParams<T> {
    shape: SasrecShape,
    data: Vec<T>,
}

#[derive(Clone, Copy)]
enum Block {
    M = 0,
    P,
    Wq,
    Wk,
    Wv,
    W1,
    W2,
    B1,
    B2,
}

impl<T: Scalar> SasrecParams<T> {
    pub fn zeros(shape: SasrecShape) -> Self {
        Self { shape, data: vec![T::zero(); shape.len()] }
    }

    /// Gaussian entries with standard deviation `scale`; the padding row of `M` stays zero.
    pub fn random<R: Rng + ?Sized>(shape: SasrecShape, scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let mut p = Self { shape, data: (0..shape.len()).map(|_| T::of(normal.sample(rng))).collect() };
        p.data[..shape.dim].iter_mut().for_each(|x| *x = T::zero());
        p
    }

    pub fn from_flat(shape: SasrecShape, data: Vec<T>) -> Result<Self, DemandError> {
        if data.len() != shape.len() {
            return Err(DemandError::Shape { expected: shape.len(), got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> SasrecShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Embedding row of token `t` (the `t`-th column of `M`).
    pub fn embedding(&self, token: usize) -> &[T] {
        let d = self.shape.dim;
        &self.block(Block::M)[token * d..(token + 1) * d]
    }

    pub fn embedding_mut(&mut self, token: usize) -> &mut [T] {
        let d = self.shape.dim;
        &mut self.block_mut(Block::M)[token * d..(token + 1) * d]
    }

    fn block(&self, b: Block) -> &[T] {
        let o = self.shape.offsets();
        &self.data[o[b as usize]..o[b as usize + 1]]
    }

    fn block_mut(&mut self, b: Block) -> &mut [T] {
        let o = self.shape.offsets();
        &mut self.data[o[b as usize]..o[b as usize + 1]]
    }

    /// `self -= lr * grad`.
    pub fn descend(&mut self, grad: &Self, lr: T) -> Result<(), DemandError> {
        if grad.shape != self.shape {
            return Err(DemandError::Shape { expected: self.data.len(), got: grad.data.len() });
        }
        for (x, g) in self.data.iter_mut().zip(&grad.data) {
            *x = *x - lr * *g;
        }
        Ok(())
    }

    /// Text checkpoint: a header line `sasrec <dim> <files> <positions>` followed by
    /// one value per line in the flat layout documented on the type.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "sasrec {} {} {}", self.shape.dim, self.shape.files, self.shape.positions)?;
        for x in &self.data {
            writeln!(out, "{}", x.as_f64())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self, DemandError> {
        let bad = |line: usize, reason: &str| DemandError::Checkpoint { line, reason: reason.to_string() };
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty file"))?.map_err(|e| bad(1, &e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "sasrec" {
            return Err(bad(1, "expected `sasrec <dim> <files> <positions>`"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(1, "non-integer shape"));
        let shape = SasrecShape { dim: num(fields[1])?, files: num(fields[2])?, positions: num(fields[3])? };
        let mut data = Vec::with_capacity(shape.len());
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| bad(i + 2, &e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: f64 = line.trim().parse().map_err(|_| bad(i + 2, "not a number"))?;
            data.push(T::of(v));
        }
        Self::from_flat(shape, data)
    }
}

/// Intermediate activations kept for the reverse pass; all `L×d` except `att` (`L×L`).
struct Activations<T> {
    tokens: Vec<usize>,
    e: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    att: Vec<T>,
    s: Vec<T>,
    pre: Vec<T>,
    h: Vec<T>,
    out: Vec<T>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `x·W` for each of the `x.len() / d` rows.
fn project<T: Scalar>(x: &[T], w: &[T], d: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks(d).zip(y.chunks_mut(d)) {
        for (j, &xj) in xr.iter().enumerate() {
            if xj == T::zero() {
                continue;
            }
            for (yk, &wjk) in yr.iter_mut().zip(&w[j * d..(j + 1) * d]) {
                *yk = *yk + xj * wjk;
            }
        }
    }
    y
}

/// `dW += xᵀ·dy`.
fn accumulate_outer<T: Scalar>(x: &[T], dy: &[T], dw: &mut [T], d: usize) {
    for (xr, dyr) in x.chunks(d).zip(dy.chunks(d)) {
        for (j, &xj) in xr.iter().enumerate() {
            for (g, &dk) in dw[j * d..(j + 1) * d].iter_mut().zip(dyr) {
                *g = *g + xj * dk;
            }
        }
    }
}

/// `dx += dy·Wᵀ`.
fn back_project<T: Scalar>(dy: &[T], w: &[T], dx: &mut [T], d: usize) {
    for (dyr, dxr) in dy.chunks(d).zip(dx.chunks_mut(d)) {
        for (j, g) in dxr.iter_mut().enumerate() {
            *g = *g + dot(dyr, &w[j * d..(j + 1) * d]);
        }
    }
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

impl<T: Scalar> SasrecParams<T> {
    fn check_tokens(&self, tokens: &[u32]) -> Result<(), DemandError> {
        let sh = self.shape;
        if tokens.len() != sh.positions {
            return Err(DemandError::SequenceLength { expected: sh.positions, got: tokens.len() });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize > sh.files) {
            return Err(DemandError::FileOutOfRange { file: t as usize - 1, file_count: sh.files });
        }
        Ok(())
    }

    fn activations(&self, tokens: &[u32]) -> Result<Activations<T>, DemandError> {
        self.check_tokens(tokens)?;
        let d = self.shape.dim;
        let l = tokens.len();
        let tokens: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos = self.block(Block::P);
        let mut e = vec![T::zero(); l * d];
        for (i, &t) in tokens.iter().enumerate() {
            for (c, (&m, &p)) in e[i * d..(i + 1) * d].iter_mut().zip(self.embedding(t).iter().zip(&pos[i * d..(i + 1) * d])) {
                *c = m + p;
            }
        }
        let q = project(&e, self.block(Block::Wq), d);
        let k = project(&e, self.block(Block::Wk), d);
        let v = project(&e, self.block(Block::Wv), d);

        // Causal: row i only ever reads columns 0..=i, so later tokens cannot leak in.
        let scale = T::one() / T::of_usize(d).sqrt();
        let mut att = vec![T::zero(); l * l];
        for i in 0..l {
            let qi = &q[i * d..(i + 1) * d];
            let row = &mut att[i * l..i * l + i + 1];
            for (j, a) in row.iter_mut().enumerate() {
                *a = dot(qi, &k[j * d..(j + 1) * d]) * scale;
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for a in row.iter_mut() {
                *a = (*a - mx).exp();
                z = z + *a;
            }
            row.iter_mut().for_each(|a| *a = *a / z);
        }
        let mut s = vec![T::zero(); l * d];
        for i in 0..l {
            for j in 0..=i {
                let a = att[i * l + j];
                for (sc, &vc) in s[i * d..(i + 1) * d].iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *sc = *sc + a * vc;
                }
            }
        }
        let mut pre = project(&s, self.block(Block::W1), d);
        let b1 = self.block(Block::B1);
        pre.chunks_mut(d).for_each(|r| r.iter_mut().zip(b1).for_each(|(x, &b)| *x = *x + b));
        let h: Vec<T> = pre.iter().map(|&x| x.max(T::zero())).collect();
        let mut out = project(&h, self.block(Block::W2), d);
        let b2 = self.block(Block::B2);
        out.chunks_mut(d).for_each(|r| r.iter_mut().zip(b2).for_each(|(x, &b)| *x = *x + b));
        Ok(Activations { tokens, e, q, k, v, att, s, pre, h, out })
    }

    /// Score of catalog file `f` at position `i`.
    fn logit(&self, act: &Activations<T>, i: usize, f: usize) -> T {
        let d = self.shape.dim;
        dot(&act.out[i * d..(i + 1) * d], self.embedding(f + 1))
    }

    /// Per-position probabilities over the real catalog for an input of
    /// exactly `I - I'` tokens.
    pub fn scores(&self, tokens: &[u32]) -> Result<Vec<Vec<T>>, DemandError> {
        let act = self.activations(tokens)?;
        Ok((0..tokens.len()).map(|i| (0..self.shape.files).map(|f| sigmoid(self.logit(&act, i, f))).collect()).collect())
    }

    /// Row-stochastic causal attention weights (`L×L`, zero above the diagonal).
    pub fn attention(&self, tokens: &[u32]) -> Result<Vec<Vec<T>>, DemandError> {
        let act = self.activations(tokens)?;
        let l = tokens.len();
        Ok(act.att.chunks(l).map(|r| r.to_vec()).collect())
    }
}

/// Scores for the training view of `history`: its first `I - I'` tokens.
pub fn sasrec_forward<T: Scalar>(params: &SasrecParams<T>, history: &RequestHistory) -> Result<Vec<Vec<T>>, DemandError> {
    let l = params.shape.positions;
    if history.len() < l {
        return Err(DemandError::SequenceLength { expected: l, got: history.len() });
    }
    params.scores(&history.tokens()[..l])
}

/// Up to `count` distinct negatives per position, uniform over files not in
/// that position's targets. Positions without targets get none.
pub fn sample_negatives<R: Rng + ?Sized>(targets: &[Vec<usize>], file_count: usize, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut is_pos = vec![false; file_count];
    targets
        .iter()
        .map(|pos| {
            if pos.is_empty() {
                return Vec::new();
            }
            pos.iter().for_each(|&f| is_pos[f] = true);
            let pool: Vec<usize> = (0..file_count).filter(|&f| !is_pos[f]).collect();
            pos.iter().for_each(|&f| is_pos[f] = false);
            let k = count.min(pool.len());
            sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
        })
        .collect()
}

/// Binary cross-entropy over positives and the given negatives, with its exact gradient.
///
/// `targets[i]` and `negatives[i]` are catalog ids for input position `i`;
/// positions with no targets are skipped.
pub fn sasrec_loss_grad<T: Scalar>(
    params: &SasrecParams<T>,
    history: &RequestHistory,
    targets: &[Vec<usize>],
    negatives: &[Vec<usize>],
) -> Result<(T, SasrecParams<T>), DemandError> {
    let sh = params.shape;
    let (d, l) = (sh.dim, sh.positions);
    if targets.len() != l || negatives.len() != l {
        return Err(DemandError::SequenceLength { expected: l, got: targets.len().min(negatives.len()) });
    }
    if targets.iter().all(|t| t.is_empty()) {
        return Err(DemandError::EmptyTargets);
    }
    if let Some(&f) = targets.iter().chain(negatives).flatten().find(|&&f| f >= sh.files) {
        return Err(DemandError::FileOutOfRange { file: f, file_count: sh.files });
    }
    if history.len() < l {
        return Err(DemandError::SequenceLength { expected: l, got: history.len() });
    }
    let act = params.activations(&history.tokens()[..l])?;
    let mut grad = SasrecParams::zeros(sh);
    let mut loss = T::zero();

    // Output layer: z = out_i · M_f.
    let mut dout = vec![T::zero(); l * d];
    for i in 0..l {
        if targets[i].is_empty() {
            continue;
        }
        let terms = targets[i].iter().map(|&f| (f, true)).chain(negatives[i].iter().map(|&f| (f, false)));
        for (f, positive) in terms {
            let z = params.logit(&act, i, f);
            let (value, dz) = if positive { (softplus(-z), sigmoid(z) - T::one()) } else { (softplus(z), sigmoid(z)) };
            loss = loss + value;
            let m = params.embedding(f + 1);
            for (g, &mc) in dout[i * d..(i + 1) * d].iter_mut().zip(m) {
                *g = *g + dz * mc;
            }
            let oi = &act.out[i * d..(i + 1) * d];
            for (g, &oc) in grad.embedding_mut(f + 1).iter_mut().zip(oi) {
                *g = *g + dz * oc;
            }
        }
    }

    // Feed-forward block.
    {
        let db2 = grad.block_mut(Block::B2);
        dout.chunks(d).for_each(|r| db2.iter_mut().zip(r).for_each(|(g, &x)| *g = *g + x));
    }
    accumulate_outer(&act.h, &dout, grad.block_mut(Block::W2), d);
    let mut dpre = vec![T::zero(); l * d];
    back_project(&dout, params.block(Block::W2), &mut dpre, d);
    for (g, &p) in dpre.iter_mut().zip(&act.pre) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
    {
        let db1 = grad.block_mut(Block::B1);
        dpre.chunks(d).for_each(|r| db1.iter_mut().zip(r).for_each(|(g, &x)| *g = *g + x));
    }
    accumulate_outer(&act.s, &dpre, grad.block_mut(Block::W1), d);
    let mut ds = vec![T::zero(); l * d];
    back_project(&dpre, params.block(Block::W1), &mut ds, d);

    // Attention.
    let scale = T::one() / T::of_usize(d).sqrt();
    let mut dq = vec![T::zero(); l * d];
    let mut dk = vec![T::zero(); l * d];
    let mut dv = vec![T::zero(); l * d];
    let mut da = vec![T::zero(); l];
    for i in 0..l {
        let dsi = &ds[i * d..(i + 1) * d];
        let arow = &act.att[i * l..i * l + i + 1];
        for j in 0..=i {
            da[j] = dot(dsi, &act.v[j * d..(j + 1) * d]);
            for (g, &x) in dv[j * d..(j + 1) * d].iter_mut().zip(dsi) {
                *g = *g + arow[j] * x;
            }
        }
        let mean = dot(arow, &da[..=i]);
        for j in 0..=i {
            let dscore = arow[j] * (da[j] - mean) * scale;
            if dscore == T::zero() {
                continue;
            }
            for c in 0..d {
                dq[i * d + c] = dq[i * d + c] + dscore * act.k[j * d + c];
                dk[j * d + c] = dk[j * d + c] + dscore * act.q[i * d + c];
            }
        }
    }
    accumulate_outer(&act.e, &dq, grad.block_mut(Block::Wq), d);
    accumulate_outer(&act.e, &dk, grad.block_mut(Block::Wk), d);
    accumulate_outer(&act.e, &dv, grad.block_mut(Block::Wv), d);
    let mut de = vec![T::zero(); l * d];
    back_project(&dq, params.block(Block::Wq), &mut de, d);
    back_project(&dk, params.block(Block::Wk), &mut de, d);
    back_project(&dv, params.block(Block::Wv), &mut de, d);

    // Embeddings.
    grad.block_mut(Block::P).iter_mut().zip(&de).for_each(|(g, &x)| *g = *g + x);
    for (i, &t) in act.tokens.iter().enumerate() {
        if t == 0 {
            continue;
        }
        for (g, &x) in grad.embedding_mut(t).iter_mut().zip(&de[i * d..(i + 1) * d]) {
            *g = *g + x;
        }
    }
    // Padding row is frozen at zero.
    grad.embedding_mut(0).iter_mut().for_each(|g| *g = T::zero());
    Ok((loss, grad))
}

/// Probability of requesting each catalog file, read at the last position of
/// the most recent `I - I'` tokens.
pub fn predict_demand<T: Scalar>(params: &SasrecParams<T>, history: &RequestHistory) -> Result<Vec<T>, DemandError> {
    let l = params.shape.positions;
    let toks = history.tokens();
    let input: Vec<u32> = if toks.len() >= l {
        toks[toks.len() - l..].to_vec()
    } else {
        let mut v = vec![0u32; l - toks.len()];
        v.extend_from_slice(toks);
        v
    };
    let mut rows = params.scores(&input)?;
    Ok(rows.pop().expect("at least one position"))
}
