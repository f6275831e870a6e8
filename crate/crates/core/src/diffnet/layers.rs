//! The handful of layers the tracker and policy need. Each layer is a set of
//! parameter handles; forward passes record onto a caller-supplied tape.

use rand::Rng;

use super::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = ps.add_uniform(format!("{name}.w"), in_dim, out_dim, in_dim, rng)?;
        let b = if bias {
            Some(ps.add_zeros(format!("{name}.b"), 1, out_dim)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.affine(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // fan_in of 1 gives U(-1, 1) rows
        let table = ps.add_uniform(format!("{name}.table"), vocab, dim, 1, rng)?;
        Ok(Self { table, vocab, dim })
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[u32]) -> Result<NodeId> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::UnknownToken(bad));
        }
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let table = tape.param(self.table);
        tape.gather(table, &idx)
    }
}

/// Gated recurrent unit with reset gate applied after the hidden projection:
///
/// r = σ(x·W_r + h·U_r + b), z = σ(x·W_z + h·U_z + b),
/// n = tanh(x·W_n + b + r ⊙ (h·U_n + b)), h' = (1 − z) ⊙ n + z ⊙ h.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w_ih: ps.add_uniform(format!("{name}.w_ih"), in_dim, 3 * hidden, hidden, rng)?,
            w_hh: ps.add_uniform(format!("{name}.w_hh"), hidden, 3 * hidden, hidden, rng)?,
            b_ih: ps.add_uniform(format!("{name}.b_ih"), 1, 3 * hidden, hidden, rng)?,
            b_hh: ps.add_uniform(format!("{name}.b_hh"), 1, 3 * hidden, hidden, rng)?,
            in_dim,
            hidden,
        })
    }

    /// Input projection for a whole batch/sequence of rows at once.
    pub fn project_inputs(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.param(self.w_ih);
        let b = tape.param(self.b_ih);
        tape.affine(x, w, Some(b))
    }

    /// One step given pre-projected inputs `gx` (n×3H) and state `h` (n×H).
    pub fn step_projected(&self, tape: &mut Tape, gx: NodeId, h: NodeId) -> Result<NodeId> {
        let hd = self.hidden;
        let w = tape.param(self.w_hh);
        let b = tape.param(self.b_hh);
        let gh = tape.affine(h, w, Some(b))?;
        let xr = tape.slice_cols(gx, 0, hd)?;
        let xz = tape.slice_cols(gx, hd, hd)?;
        let xn = tape.slice_cols(gx, 2 * hd, hd)?;
        let hr = tape.slice_cols(gh, 0, hd)?;
        let hz = tape.slice_cols(gh, hd, hd)?;
        let hn = tape.slice_cols(gh, 2 * hd, hd)?;
        let r_pre = tape.add(xr, hr)?;
        let r = tape.sigmoid(r_pre);
        let z_pre = tape.add(xz, hz)?;
        let z = tape.sigmoid(z_pre);
        let rh = tape.mul(r, hn)?;
        let n_pre = tape.add(xn, rh)?;
        let n = tape.tanh(n_pre);
        // (1 − z)·n + z·h = n + z·(h − n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    pub fn step(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> Result<NodeId> {
        let gx = self.project_inputs(tape, x)?;
        self.step_projected(tape, gx, h)
    }

    /// Runs over the rows of `xs` (L×in) from `h0` (1×H); returns the L×H
    /// stack of states. `reverse` walks the sequence from the end but the
    /// output rows stay aligned with the input rows.
    pub fn run(&self, tape: &mut Tape, xs: NodeId, h0: NodeId, reverse: bool) -> Result<NodeId> {
        let len = tape.shape(xs).0;
        let gx_all = self.project_inputs(tape, xs)?;
        let mut h = h0;
        let mut states = vec![h0; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let gx = tape.slice_rows(gx_all, t, 1)?;
            h = self.step_projected(tape, gx, h)?;
            states[t] = h;
        }
        tape.concat_rows(&states)
    }
}

/// Steps `cell` over a time-major batch, freezing each sequence's state
/// once it runs out of steps (or, walking backwards, until it starts).
fn run_masked(
    cell: &GruCell,
    tape: &mut Tape,
    xs: NodeId,
    lens: &[usize],
    steps: usize,
    reverse: bool,
) -> Result<NodeId> {
    let batch = lens.len();
    let hd = cell.hidden;
    let gx_all = cell.project_inputs(tape, xs)?;
    let mut h = tape.input(Tensor::zeros(batch, hd));
    let mut states = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let gx = tape.slice_rows(gx_all, t * batch, batch)?;
        let next = cell.step_projected(tape, gx, h)?;
        h = if lens.iter().all(|&l| t < l) {
            next
        } else {
            let mut m = Vec::with_capacity(batch * hd);
            for &l in lens {
                m.extend(std::iter::repeat(if t < l { 1.0 } else { 0.0 }).take(hd));
            }
            let mask = tape.input(Tensor::from_vec(batch, hd, m)?);
            let delta = tape.sub(next, h)?;
            let delta = tape.mul(mask, delta)?;
            tape.add(h, delta)?
        };
        states[t] = h;
    }
    tape.concat_rows(&states)
}

/// Bidirectional GRU; output rows are `[forward ; backward]` states.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

impl BiGru {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_per_dir: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fwd: GruCell::new(ps, &format!("{name}.fwd"), in_dim, hidden_per_dir, rng)?,
            bwd: GruCell::new(ps, &format!("{name}.bwd"), in_dim, hidden_per_dir, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    /// Runs over a time-major padded batch: row `t·B + i` of `xs` is step `t`
    /// of sequence `i`, which has `lens[i]` valid steps. Padding never
    /// influences valid states; padded output rows are unspecified.
    pub fn forward_batch(&self, tape: &mut Tape, xs: NodeId, lens: &[usize]) -> Result<NodeId> {
        let batch = lens.len();
        let total = tape.shape(xs).0;
        if batch == 0 || total % batch != 0 {
            return Err(Error::ShapeMismatch {
                node: "bigru".into(),
                detail: format!("{total} rows for {batch} sequences"),
            });
        }
        let steps = total / batch;
        let f = run_masked(&self.fwd, tape, xs, lens, steps, false)?;
        let b = run_masked(&self.bwd, tape, xs, lens, steps, true)?;
        tape.concat_cols(&[f, b])
    }

    pub fn forward(&self, tape: &mut Tape, xs: NodeId) -> Result<NodeId> {
        let h0f = tape.input(Tensor::zeros(1, self.fwd.hidden));
        let h0b = tape.input(Tensor::zeros(1, self.bwd.hidden));
        let f = self.fwd.run(tape, xs, h0f, false)?;
        let b = self.bwd.run(tape, xs, h0b, true)?;
        tape.concat_cols(&[f, b])
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{dim} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(ps, &format!("{name}.q"), dim, dim, true, rng)?,
            wk: Linear::new(ps, &format!("{name}.k"), dim, dim, true, rng)?,
            wv: Linear::new(ps, &format!("{name}.v"), dim, dim, true, rng)?,
            wo: Linear::new(ps, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// Keys/values projected once, reusable across many query sets.
    pub fn project_memory(&self, tape: &mut Tape, memory: NodeId) -> Result<(NodeId, NodeId)> {
        Ok((
            self.wk.forward(tape, memory)?,
            self.wv.forward(tape, memory)?,
        ))
    }

    pub fn attend(
        &self,
        tape: &mut Tape,
        queries: NodeId,
        keys: NodeId,
        values: NodeId,
    ) -> Result<NodeId> {
        let q = self.wq.forward(tape, queries)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(keys, h * dh, dh)?;
            let vh = tape.slice_cols(values, h * dh, dh)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            outs.push(tape.matmul(weights, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.wo.forward(tape, cat)
    }

    /// One query set against a time-major batch of memories (see
    /// [`Tape::shared_attention`]). `q` must already be projected.
    pub fn attend_shared(
        &self,
        tape: &mut Tape,
        q: NodeId,
        keys: NodeId,
        values: NodeId,
        lens: &[usize],
    ) -> Result<NodeId> {
        let dh = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(keys, h * dh, dh)?;
            let vh = tape.slice_cols(values, h * dh, dh)?;
            outs.push(tape.shared_attention(qh, kh, vh, lens)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.wo.forward(tape, cat)
    }

    pub fn forward(&self, tape: &mut Tape, queries: NodeId, memory: NodeId) -> Result<NodeId> {
        let (k, v) = self.project_memory(tape, memory)?;
        self.attend(tape, queries, k, v)
    }
}

/// Same-padded convolution over a sequence followed by mean pooling.
#[derive(Debug, Clone)]
pub struct SetPooler {
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
    pub dim: usize,
}

impl SetPooler {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: ps.add_uniform(format!("{name}.w"), width * dim, dim, width * dim, rng)?,
            b: ps.add_zeros(format!("{name}.b"), 1, dim)?,
            width,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, seq: NodeId) -> Result<NodeId> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let conv = tape.conv1d(seq, w, b, self.width)?;
        Ok(tape.mean_rows(conv))
    }

    /// Pools consecutive blocks of `group` rows independently, one output
    /// row per block.
    pub fn forward_grouped(&self, tape: &mut Tape, seqs: NodeId, group: usize) -> Result<NodeId> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let conv = tape.conv1d_grouped(seqs, w, b, self.width, group)?;
        tape.mean_groups(conv, group)
    }
}

/// Two-layer perceptron with a tanh hidden layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(ps, &format!("{name}.l1"), in_dim, hidden, true, rng)?,
            l2: Linear::new(ps, &format!("{name}.l2"), hidden, out_dim, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = self.l1.forward(tape, x)?;
        let h = tape.tanh(h);
        self.l2.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn zero_all(ps: &mut ParamStore) {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let (r, c) = ps.get(id).shape();
            ps.set(id, Tensor::zeros(r, c)).unwrap();
        }
    }

    #[test]
    fn zero_linear_gives_zero() {
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "l", 3, 2, true, &mut stream(0, "t")).unwrap();
        zero_all(&mut ps);
        let mut tape = Tape::new(&ps);
        let x = tape.input(Tensor::row(&[1.0, -2.0, 5.0]));
        let y = lin.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_gru_halves_the_state() {
        let mut ps = ParamStore::new();
        let gru = GruCell::new(&mut ps, "g", 2, 3, &mut stream(0, "t")).unwrap();
        zero_all(&mut ps);
        let mut tape = Tape::new(&ps);
        let x = tape.input(Tensor::row(&[0.4, -0.7]));
        let h = tape.input(Tensor::row(&[1.0, -0.5, 0.2]));
        let h1 = gru.step(&mut tape, x, h).unwrap();
        // z = σ(0) = 0.5, n = tanh(0) = 0 → h' = 0.5·h
        assert_eq!(tape.value(h1).data(), &[0.5, -0.25, 0.1]);
    }

    #[test]
    fn single_key_attention_returns_value() {
        let mut ps = ParamStore::new();
        let att = MultiHeadAttention::new(&mut ps, "a", 4, 2, &mut stream(1, "t")).unwrap();
        let mut tape = Tape::new(&ps);
        let q = tape.input(
            Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.0, 2.0, 0.5]]).unwrap(),
        );
        let mem = tape.input(Tensor::row(&[0.5, -0.5, 1.0, 0.0]));
        let out = att.forward(&mut tape, q, mem).unwrap();
        let v = att.wv.forward(&mut tape, mem).unwrap();
        let expected = att.wo.forward(&mut tape, v).unwrap();
        let exp = tape.value(expected).data().to_vec();
        for r in 0..2 {
            for (a, b) in tape.value(out).row_slice(r).iter().zip(&exp) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_pooler_is_mean() {
        let mut ps = ParamStore::new();
        let pool = SetPooler::new(&mut ps, "p", 2, 3, &mut stream(2, "t")).unwrap();
        // centre tap = identity, side taps = 0
        let mut w = Tensor::zeros(6, 2);
        w.data_mut()[2 * 2] = 1.0;
        w.data_mut()[3 * 2 + 1] = 1.0;
        ps.set(pool.w, w).unwrap();
        let mut tape = Tape::new(&ps);
        let seq = tape
            .input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![5.0, 8.0]]).unwrap());
        let y = pool.forward(&mut tape, seq).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
    }

    #[test]
    fn unknown_token_rejected() {
        let mut ps = ParamStore::new();
        let emb = Embedding::new(&mut ps, "e", 5, 2, &mut stream(0, "t")).unwrap();
        let mut tape = Tape::new(&ps);
        assert!(matches!(
            emb.forward(&mut tape, &[1, 9]),
            Err(Error::UnknownToken(9))
        ));
    }
}
