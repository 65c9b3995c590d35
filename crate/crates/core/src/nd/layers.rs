use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::matrix::{dot, Matrix};
use super::params::{glorot_uniform, ParamStore, Tensor};
use super::tape::{Tape, Var};
use crate::error::{arg_err, Result};

/// Fully connected layer `x · Wᵀ + b` over a batch of rows, with `W` stored
/// as `name.w` (`out x in`) and `b` as `name.b`.
pub fn dense(tape: &mut Tape, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let (in_w, in_x) = (tape.value(w).cols(), tape.value(x).cols());
    if in_w != in_x {
        return Err(arg_err!(
            "layer `{}` expects width {}, got {}",
            name,
            in_w,
            in_x
        ));
    }
    let y = tape.matmul_nt(x, w)?;
    tape.add_row(y, b)
}

/// Inserts glorot-initialized weights and zero biases for one dense layer.
pub fn init_dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let w = glorot_uniform(rng, fan_in, fan_out, fan_in * fan_out);
    store.insert(&format!("{name}.w"), Tensor::new(vec![fan_out, fan_in], w)?)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(vec![fan_out]))
}

/// Stack of dense layers with tanh between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    /// Layer widths including input and output, e.g. `[17, 64, 64, 2]`.
    pub sizes: Vec<usize>,
    /// Apply tanh after the last layer as well.
    pub tanh_output: bool,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: &[usize], tanh_output: bool) -> Self {
        Self {
            prefix: prefix.into(),
            sizes: sizes.to_vec(),
            tanh_output,
        }
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap_or(&0)
    }

    fn layer_name(&self, k: usize) -> String {
        format!("{}.l{}", self.prefix, k)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for (k, pair) in self.sizes.windows(2).enumerate() {
            init_dense(store, rng, &self.layer_name(k), pair[0], pair[1])?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let layers = self.sizes.len().saturating_sub(1);
        let mut h = x;
        for k in 0..layers {
            h = dense(tape, store, h, &self.layer_name(k))?;
            if k + 1 < layers || self.tanh_output {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Same computation as [`Mlp::forward`] without recording a tape.
    pub fn eval(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        let layers = self.sizes.len().saturating_sub(1);
        let mut h = x.clone();
        for k in 0..layers {
            h = dense_eval(store, &h, &self.layer_name(k))?;
            if k + 1 < layers || self.tanh_output {
                h.data_mut().iter_mut().for_each(|v| *v = libm::tanh(*v));
            }
        }
        Ok(h)
    }
}

/// Tape-free [`dense`].
pub fn dense_eval(store: &ParamStore, x: &Matrix, name: &str) -> Result<Matrix> {
    let w = store.require(&format!("{name}.w"))?;
    let b = store.require(&format!("{name}.b"))?;
    let (out_w, in_w) = (w.shape()[0], w.len() / w.shape()[0].max(1));
    if in_w != x.cols() {
        return Err(arg_err!(
            "layer `{}` expects width {}, got {}",
            name,
            in_w,
            x.cols()
        ));
    }
    let mut y = Matrix::zeros(x.rows(), out_w);
    for r in 0..x.rows() {
        let xr = x.row(r);
        for (o, (wrow, bias)) in y
            .row_mut(r)
            .iter_mut()
            .zip(w.data().chunks_exact(in_w).zip(b.data()))
        {
            *o = dot(xr, wrow) + bias;
        }
    }
    Ok(y)
}

/// How per-head GAT outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GatMerge {
    #[default]
    Average,
    /// Concatenate heads and project back to the feature width.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatConfig {
    pub features: usize,
    pub heads: usize,
    pub merge: GatMerge,
    pub negative_slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            features: 32,
            heads: 4,
            merge: GatMerge::Average,
            negative_slope: 0.2,
        }
    }
}

pub struct GatOutput {
    /// Residual output `tanh(merge + h)`, same shape as the input.
    pub out: Var,
    /// Attention matrices per head, `G·n x n` (row-stochastic).
    pub attention: Vec<Var>,
}

impl GatConfig {
    pub fn init<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<()> {
        let f = self.features;
        for d in 0..self.heads {
            let w = glorot_uniform(rng, f, f, f * f);
            store.insert(&format!("{prefix}.head{d}.w"), Tensor::new(vec![f, f], w)?)?;
            // the attention vector a spans [Wh_i ‖ Wh_j]; its halves are stored apart
            let a = glorot_uniform(rng, 2 * f, 1, 2 * f);
            store.insert(
                &format!("{prefix}.head{d}.a_src"),
                Tensor::new(vec![f], a[..f].to_vec())?,
            )?;
            store.insert(
                &format!("{prefix}.head{d}.a_dst"),
                Tensor::new(vec![f], a[f..].to_vec())?,
            )?;
        }
        if self.merge == GatMerge::Concat {
            let w = glorot_uniform(rng, self.heads * f, f, self.heads * f * f);
            store.insert(
                &format!("{prefix}.merge.w"),
                Tensor::new(vec![f, self.heads * f], w)?,
            )?;
        }
        Ok(())
    }
}

/// Residual graph attention over `G` independent graphs of `n` nodes whose
/// features are stacked as consecutive row blocks of `h`.
///
/// `adjacency` (`n x n`, nonzero = edge) restricts which neighbors a node
/// attends to; `None` means the complete graph with self-loops.
pub fn gat_layer(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h: Var,
    n: usize,
    adjacency: Option<&Matrix>,
    cfg: &GatConfig,
) -> Result<GatOutput> {
    let (rows, width) = tape.value(h).shape();
    if width != cfg.features {
        return Err(arg_err!(
            "gat `{}` expects {} features, got {}",
            prefix,
            cfg.features,
            width
        ));
    }
    if n == 0 || rows % n != 0 {
        return Err(arg_err!(
            "gat: {} rows is not a multiple of {} nodes",
            rows,
            n
        ));
    }
    let mask = match adjacency {
        Some(adj) => {
            if adj.shape() != (n, n) {
                return Err(arg_err!("gat: adjacency {:?} for {} nodes", adj.shape(), n));
            }
            if (0..n).any(|i| (0..n).all(|j| adj.get(i, j) == 0.0)) {
                return Err(arg_err!("gat: a node without neighbors"));
            }
            let mut m = Matrix::zeros(rows, n);
            for r in 0..rows {
                for j in 0..n {
                    if adj.get(r % n, j) == 0.0 {
                        m.set(r, j, -1e30);
                    }
                }
            }
            Some(tape.constant(m))
        }
        None => None,
    };

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for d in 0..cfg.heads {
        let w = tape.param(store, &format!("{prefix}.head{d}.w"))?;
        let a_src = tape.param(store, &format!("{prefix}.head{d}.a_src"))?;
        let a_dst = tape.param(store, &format!("{prefix}.head{d}.a_dst"))?;
        let wh = tape.matmul_nt(h, w)?;
        let src = tape.matmul_nt(wh, a_src)?;
        let dst = tape.matmul_nt(wh, a_dst)?;
        let pairs = tape.pair_sum(src, dst, n)?;
        let mut e = tape.leaky_relu(pairs, cfg.negative_slope);
        if let Some(m) = mask {
            e = tape.add(e, m)?;
        }
        let alpha = tape.softmax_rows(e);
        heads.push(tape.block_matmul(alpha, wh, n)?);
        attention.push(alpha);
    }

    let merged = match cfg.merge {
        GatMerge::Average => {
            let mut acc = heads[0];
            for &hd in &heads[1..] {
                acc = tape.add(acc, hd)?;
            }
            tape.scale(acc, 1.0 / cfg.heads as f64)
        }
        GatMerge::Concat => {
            let cat = tape.concat_cols(&heads)?;
            let w = tape.param(store, &format!("{prefix}.merge.w"))?;
            tape.matmul_nt(cat, w)?
        }
    };
    let res = tape.add(merged, h)?;
    Ok(GatOutput {
        out: tape.tanh(res),
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn dense_identity_and_scalar() {
        let mut store = ParamStore::new();
        store
            .insert(
                "id.w",
                Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        store.insert("id.b", Tensor::zeros(vec![2])).unwrap();
        store
            .insert("s.w", Tensor::new(vec![1, 1], vec![2.0]).unwrap())
            .unwrap();
        store
            .insert("s.b", Tensor::new(vec![1], vec![1.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(vec![0.3, -1.2]));
        let y = dense(&mut tape, &store, x, "id").unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, -1.2]);
        let x = tape.constant(Matrix::scalar(3.0));
        let y = dense(&mut tape, &store, x, "s").unwrap();
        assert_eq!(tape.scalar(y), 7.0);
    }

    #[test]
    fn eval_matches_tape_forward() {
        let mlp = Mlp::new("m", &[3, 8, 2], false);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut stream(2, "t", &[])).unwrap();
        let x = Matrix::from_vec(2, 3, vec![0.1, 0.2, -0.3, 1.0, -1.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &store, xv).unwrap();
        let plain = mlp.eval(&store, &x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_rejects_width_mismatch() {
        let mut store = ParamStore::new();
        init_dense(&mut store, &mut stream(1, "t", &[]), "l", 3, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(1, 4));
        assert!(dense(&mut tape, &store, x, "l").is_err());
    }

    #[test]
    fn identical_features_give_uniform_attention() {
        let cfg = GatConfig {
            features: 3,
            heads: 2,
            ..GatConfig::default()
        };
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut stream(3, "gat", &[]), "g")
            .unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::filled(4, 3, 0.4));
        let mut adj = Matrix::zeros(4, 4);
        for (i, j) in [
            (0, 0),
            (0, 1),
            (1, 1),
            (1, 2),
            (1, 3),
            (2, 2),
            (3, 0),
            (3, 3),
        ] {
            adj.set(i, j, 1.0);
        }
        let out = gat_layer(&mut tape, &store, "g", h, 4, Some(&adj), &cfg).unwrap();
        for &a in &out.attention {
            let alpha = tape.value(a);
            for i in 0..4 {
                let deg = (0..4).filter(|&j| adj.get(i, j) != 0.0).count() as f64;
                for j in 0..4 {
                    let want = if adj.get(i, j) != 0.0 { 1.0 / deg } else { 0.0 };
                    assert!((alpha.get(i, j) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn self_loop_only_node() {
        let cfg = GatConfig {
            features: 2,
            heads: 3,
            ..GatConfig::default()
        };
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut stream(5, "gat", &[]), "g")
            .unwrap();
        let h0 = [0.5, -0.25];
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::row_vector(h0.to_vec()));
        let out = gat_layer(&mut tape, &store, "g", h, 1, None, &cfg).unwrap();
        // each head's attention collapses to 1, so the merge is the mean of W_d h
        let mut expect = [0.0; 2];
        for d in 0..3 {
            let w = store.get(&format!("g.head{d}.w")).unwrap().data();
            for r in 0..2 {
                expect[r] += (w[2 * r] * h0[0] + w[2 * r + 1] * h0[1]) / 3.0;
            }
        }
        for r in 0..2 {
            let want = libm::tanh(expect[r] + h0[r]);
            assert!((tape.value(out.out).get(0, r) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = GatConfig {
            features: 4,
            heads: 2,
            merge: GatMerge::Concat,
            ..GatConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = stream(9, "gat", &[]);
        cfg.init(&mut store, &mut rng, "g").unwrap();
        let feats: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::from_vec(6, 4, feats).unwrap());
        let out = gat_layer(&mut tape, &store, "g", h, 3, None, &cfg).unwrap();
        assert_eq!(tape.value(out.out).shape(), (6, 4));
        for &a in &out.attention {
            for r in 0..6 {
                let s: f64 = tape.value(a).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_adjacency_rejected() {
        let cfg = GatConfig {
            features: 2,
            heads: 1,
            ..GatConfig::default()
        };
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut stream(1, "gat", &[]), "g")
            .unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::zeros(3, 2));
        let adj = Matrix::identity(2);
        assert!(gat_layer(&mut tape, &store, "g", h, 3, Some(&adj), &cfg).is_err());
    }
}
