//! Small trainable encoders.
//!
//! * text: token embedding table, mean pooling, linear projection
//! * image: linear patch projection followed by one residual self-attention
//!   mixing block
//! * lesion queries: learned queries attending over the patch embeddings with
//!   a learned key projection; values are the patch embeddings themselves
//! * evidence projection φ: linear map from lesion space to evidence space
//!
//! Each encoder owns plain [`Matrix`] parameters and is `bind`-ed into a
//! [`Graph`] once per step; the bound handle runs the forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Matrix, Var};

pub const INIT_SCALE: f64 = 0.05;

/// uniform(−scale, scale) initialisation.
pub fn init_uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub token_embedding: Matrix,
    pub output_projection: Matrix,
}

impl TextEncoder {
    pub fn init(vocab: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            token_embedding: init_uniform(vocab, d, INIT_SCALE, rng),
            output_projection: init_uniform(d, d, INIT_SCALE, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.token_embedding.rows()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundText {
        self.bind_with(&mut |m| g.param(m.clone()))
    }

    /// Binds with caller-supplied nodes, one call per block in field order.
    pub fn bind_with(&self, bind: &mut dyn FnMut(&Matrix) -> Var) -> BoundText {
        BoundText {
            token_embedding: bind(&self.token_embedding),
            output_projection: bind(&self.output_projection),
            vocab: self.vocab(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundText {
    pub token_embedding: Var,
    pub output_projection: Var,
    vocab: usize,
}

impl BoundText {
    fn check(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::input("cannot encode an empty token sequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::input(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// `(R^g, R^l)`: projected token embeddings and their mean.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[TokenId]) -> Result<(Var, Var)> {
        self.check(tokens)?;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = g.gather_rows(self.token_embedding, &idx)?;
        let local = g.matmul(emb, self.output_projection)?;
        let global = g.mean_rows(local);
        Ok((global, local))
    }

    /// Unit-norm phrase embedding `z`, 1×d.
    pub fn encode_evidence(&self, g: &mut Graph, tokens: &[TokenId]) -> Result<Var> {
        self.encode_phrases(g, &[tokens])
    }

    /// Unit-norm embeddings for many phrases at once, one row each.
    ///
    /// Mean pooling commutes with the linear projection, so the phrases are
    /// pooled first and projected in one product.
    pub fn encode_phrases(&self, g: &mut Graph, phrases: &[&[TokenId]]) -> Result<Var> {
        let mut idx = Vec::new();
        let mut segments = Vec::with_capacity(phrases.len());
        for p in phrases {
            self.check(p)?;
            segments.push((idx.len(), p.len()));
            idx.extend(p.iter().map(|&t| t as usize));
        }
        if segments.is_empty() {
            return Err(Error::input("no phrases to encode"));
        }
        let emb = g.gather_rows(self.token_embedding, &idx)?;
        let pooled = g.segment_mean(emb, &segments)?;
        let projected = g.matmul(pooled, self.output_projection)?;
        Ok(g.l2_normalize_rows(projected))
    }

    /// Global rows `R^g` for many token sequences, unnormalised.
    pub fn encode_globals(&self, g: &mut Graph, texts: &[&[TokenId]]) -> Result<Var> {
        let mut idx = Vec::new();
        let mut segments = Vec::with_capacity(texts.len());
        for t in texts {
            self.check(t)?;
            segments.push((idx.len(), t.len()));
            idx.extend(t.iter().map(|&x| x as usize));
        }
        let emb = g.gather_rows(self.token_embedding, &idx)?;
        let pooled = g.segment_mean(emb, &segments)?;
        g.matmul(pooled, self.output_projection)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub patch_projection: Matrix,
    pub patch_bias: Matrix,
    pub mix_query: Matrix,
    pub mix_key: Matrix,
    pub mix_value: Matrix,
    pub global_head: Matrix,
}

impl ImageEncoder {
    pub fn init(d_pix: usize, d_v: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            patch_projection: init_uniform(d_pix, d_v, INIT_SCALE, rng),
            patch_bias: Matrix::zeros(1, d_v),
            mix_query: init_uniform(d_v, d_v, INIT_SCALE, rng),
            mix_key: init_uniform(d_v, d_v, INIT_SCALE, rng),
            mix_value: init_uniform(d_v, d_v, INIT_SCALE, rng),
            global_head: init_uniform(d_v, d, INIT_SCALE, rng),
        }
    }

    pub fn d_pix(&self) -> usize {
        self.patch_projection.rows()
    }

    pub fn d_v(&self) -> usize {
        self.patch_projection.cols()
    }

    pub fn bind(&self, g: &mut Graph, n_patches: usize) -> BoundImage {
        self.bind_with(&mut |m| g.param(m.clone()), n_patches)
    }

    pub fn bind_with(&self, bind: &mut dyn FnMut(&Matrix) -> Var, n_patches: usize) -> BoundImage {
        BoundImage {
            patch_projection: bind(&self.patch_projection),
            patch_bias: bind(&self.patch_bias),
            mix_query: bind(&self.mix_query),
            mix_key: bind(&self.mix_key),
            mix_value: bind(&self.mix_value),
            global_head: bind(&self.global_head),
            n_patches,
            d_pix: self.d_pix(),
            tau: (self.d_v() as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundImage {
    pub patch_projection: Var,
    pub patch_bias: Var,
    pub mix_query: Var,
    pub mix_key: Var,
    pub mix_value: Var,
    pub global_head: Var,
    n_patches: usize,
    d_pix: usize,
    tau: f64,
}

impl BoundImage {
    /// Patch embeddings `I^l` (P×d_v).
    pub fn encode_local(&self, g: &mut Graph, patches: &Matrix) -> Result<Var> {
        if patches.rows() != self.n_patches || patches.cols() != self.d_pix {
            return Err(Error::input(format!(
                "image has shape {:?}, expected ({}, {})",
                patches.shape(),
                self.n_patches,
                self.d_pix
            )));
        }
        let x = g.constant(patches.clone());
        let proj = g.matmul(x, self.patch_projection)?;
        let proj = g.add_row(proj, self.patch_bias)?;
        let q = g.matmul(proj, self.mix_query)?;
        let k = g.matmul(proj, self.mix_key)?;
        let v = g.matmul(proj, self.mix_value)?;
        let (mixed, _) = g.attention(q, k, v, self.tau)?;
        g.add(proj, mixed)
    }

    /// `I^g` (1×d) from already-computed patch embeddings.
    pub fn global_from_local(&self, g: &mut Graph, local: Var) -> Result<Var> {
        let pooled = g.mean_rows(local);
        g.matmul(pooled, self.global_head)
    }

    /// `(I^g, I^l)`.
    pub fn encode_image(&self, g: &mut Graph, patches: &Matrix) -> Result<(Var, Var)> {
        let local = self.encode_local(g, patches)?;
        let global = self.global_from_local(g, local)?;
        Ok((global, local))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionQueries {
    pub queries: Matrix,
    pub key_projection: Matrix,
}

impl LesionQueries {
    pub fn init(n_lesions: usize, d_v: usize, rng: &mut impl Rng) -> Self {
        Self {
            queries: init_uniform(n_lesions, d_v, INIT_SCALE, rng),
            key_projection: init_uniform(d_v, d_v, INIT_SCALE, rng),
        }
    }

    pub fn n_lesions(&self) -> usize {
        self.queries.rows()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLesions {
        self.bind_with(&mut |m| g.param(m.clone()))
    }

    pub fn bind_with(&self, bind: &mut dyn FnMut(&Matrix) -> Var) -> BoundLesions {
        BoundLesions {
            queries: bind(&self.queries),
            key_projection: bind(&self.key_projection),
            tau: (self.queries.cols() as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLesions {
    pub queries: Var,
    pub key_projection: Var,
    tau: f64,
}

impl BoundLesions {
    /// Lesion embeddings `V` (L×d_v) and attention weights (L×P).
    pub fn lesion_attend(&self, g: &mut Graph, local: Var) -> Result<(Var, Var)> {
        let (_, dq) = g.shape(self.queries);
        let (_, dl) = g.shape(local);
        if dq != dl {
            return Err(Error::dimension(format!(
                "lesion queries have width {dq}, patch embeddings {dl}"
            )));
        }
        let keys = g.matmul(local, self.key_projection)?;
        g.attention(self.queries, keys, local, self.tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceProjection {
    pub phi: Matrix,
}

impl EvidenceProjection {
    pub fn init(d_v: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            phi: init_uniform(d_v, d, INIT_SCALE, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundProjection {
        self.bind_with(&mut |m| g.param(m.clone()))
    }

    pub fn bind_with(&self, bind: &mut dyn FnMut(&Matrix) -> Var) -> BoundProjection {
        BoundProjection {
            phi: bind(&self.phi),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundProjection {
    pub phi: Var,
}

impl BoundProjection {
    /// `φ(V)` with unit-norm rows. Zero rows stay zero.
    pub fn project_evidence(&self, g: &mut Graph, lesions: Var) -> Result<Var> {
        let p = g.matmul(lesions, self.phi)?;
        Ok(g.l2_normalize_rows(p))
    }
}

/// Rows of a projected matrix that normalised to zero.
pub fn degenerate_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .enumerate()
        .filter(|(_, r)| r.iter().all(|&v| v == 0.0))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{check_gradients, norm};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn text_constant_and_singleton() {
        let enc = TextEncoder::init(30, 8, &mut rng());
        let mut g = Graph::new();
        let b = enc.bind(&mut g);
        let (rg, rl) = b.encode_text(&mut g, &[4, 4, 4]).unwrap();
        let local = g.value(rl).clone();
        assert_eq!(local.row(0), local.row(2));
        let pooled = g.value(rg).clone();
        assert!(pooled.max_abs_diff(&local.select_rows(&[0])) < 1e-15);

        let (rg1, rl1) = b.encode_text(&mut g, &[9]).unwrap();
        assert!(g.value(rg1).max_abs_diff(g.value(rl1)) < 1e-15);
    }

    #[test]
    fn text_mean_pool_is_permutation_invariant() {
        let enc = TextEncoder::init(30, 8, &mut rng());
        let mut g = Graph::new();
        let b = enc.bind(&mut g);
        let (a, _) = b.encode_text(&mut g, &[1, 2, 3]).unwrap();
        let (c, _) = b.encode_text(&mut g, &[3, 1, 2]).unwrap();
        let (va, vc) = (g.value(a), g.value(c));
        assert!(va.max_abs_diff(vc) < 1e-15);
    }

    #[test]
    fn text_rejects_empty_and_out_of_vocab() {
        let enc = TextEncoder::init(30, 8, &mut rng());
        let mut g = Graph::new();
        let b = enc.bind(&mut g);
        assert!(matches!(b.encode_text(&mut g, &[]), Err(Error::Input(_))));
        assert!(matches!(b.encode_text(&mut g, &[30]), Err(Error::Input(_))));
    }

    #[test]
    fn evidence_is_unit_norm_and_deterministic() {
        let enc = TextEncoder::init(30, 8, &mut rng());
        let mut g = Graph::new();
        let b = enc.bind(&mut g);
        let z1 = b.encode_evidence(&mut g, &[5, 6]).unwrap();
        let z2 = b.encode_evidence(&mut g, &[5, 6]).unwrap();
        assert_eq!(g.value(z1), g.value(z2));
        assert!((norm(g.value(z1).row(0)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn evidence_gradient_matches_fd() {
        let enc = TextEncoder::init(12, 6, &mut rng());
        let err = check_gradients(
            |g, p| {
                let b = BoundText {
                    token_embedding: p[0],
                    output_projection: p[1],
                    vocab: 12,
                };
                // sum of squares of a few coordinates of z; ‖z‖² itself is constant
                let z = b.encode_evidence(g, &[1, 7, 7, 3])?;
                let w = g.constant(Matrix::row_vector(&[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]));
                let zw = g.mul(z, w)?;
                let sq = g.mul(zw, zw)?;
                Ok(g.sum(sq))
            },
            &[enc.token_embedding.clone(), enc.output_projection.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn image_zero_and_identical_patches() {
        let enc = ImageEncoder::init(4, 6, 5, &mut rng());
        let mut g = Graph::new();
        let b = enc.bind(&mut g, 9);
        let (_, local) = b.encode_image(&mut g, &Matrix::zeros(9, 4)).unwrap();
        assert!(g.value(local).data().iter().all(|&v| v == 0.0));

        let same = Matrix::from_fn(9, 4, |_, j| j as f64 - 1.5);
        let (_, local) = b.encode_image(&mut g, &same).unwrap();
        let l = g.value(local);
        for i in 1..9 {
            assert!(l
                .row(i)
                .iter()
                .zip(l.row(0))
                .all(|(a, b)| (a - b).abs() < 1e-14));
        }
        assert!(matches!(
            b.encode_image(&mut g, &Matrix::zeros(8, 4)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn image_gradcheck() {
        let mut r = rng();
        let enc = ImageEncoder::init(3, 4, 4, &mut r);
        let patches = init_uniform(5, 3, 1.0, &mut r);
        let params = vec![
            enc.patch_projection.clone(),
            init_uniform(1, 4, 0.1, &mut r),
            init_uniform(4, 4, 0.8, &mut r),
            init_uniform(4, 4, 0.8, &mut r),
            enc.mix_value.clone(),
            enc.global_head.clone(),
        ];
        let err = check_gradients(
            |g, p| {
                let b = BoundImage {
                    patch_projection: p[0],
                    patch_bias: p[1],
                    mix_query: p[2],
                    mix_key: p[3],
                    mix_value: p[4],
                    global_head: p[5],
                    n_patches: 5,
                    d_pix: 3,
                    tau: 2.0,
                };
                let (gl, lo) = b.encode_image(g, &patches)?;
                let s1 = g.mul(lo, lo)?;
                let s1 = g.sum(s1);
                let s2 = g.sum(gl);
                g.add(s1, s2)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn lesion_attend_single_patch_and_uniform() {
        let mut r = rng();
        let lq = LesionQueries::init(3, 4, &mut r);
        let mut g = Graph::new();
        let b = lq.bind(&mut g);
        let one = g.constant(Matrix::row_vector(&[0.1, 0.2, 0.3, 0.4]));
        let (v, w) = b.lesion_attend(&mut g, one).unwrap();
        for row in g.value(v).iter_rows() {
            assert_eq!(row, &[0.1, 0.2, 0.3, 0.4]);
        }
        assert!(g.value(w).row_sums().iter().all(|s| (s - 1.0).abs() < 1e-9));

        let same = g.constant(Matrix::from_fn(6, 4, |_, j| j as f64));
        let (v, _) = b.lesion_attend(&mut g, same).unwrap();
        for row in g.value(v).iter_rows() {
            for (j, x) in row.iter().enumerate() {
                assert!((x - j as f64).abs() < 1e-12);
            }
        }
        let wrong = g.constant(Matrix::zeros(6, 3));
        assert!(b.lesion_attend(&mut g, wrong).is_err());
    }

    #[test]
    fn projection_identity_zero_and_gradcheck() {
        let proj = EvidenceProjection {
            phi: Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]),
        };
        let mut g = Graph::new();
        let b = proj.bind(&mut g);
        let v = g.constant(Matrix::from_rows(&[&[0.6, 0.8], &[0.0, 0.0]]));
        let out = b.project_evidence(&mut g, v).unwrap();
        let o = g.value(out);
        assert!(o
            .row(0)
            .iter()
            .zip([0.6, 0.8, 0.0])
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(degenerate_rows(o), vec![1]);

        let mut r = rng();
        let lesions = init_uniform(3, 4, 1.0, &mut r);
        let err = check_gradients(
            |g, p| {
                let b = BoundProjection { phi: p[0] };
                let v = g.constant(lesions.clone());
                let out = b.project_evidence(g, v)?;
                let w = g.constant(Matrix::from_fn(3, 5, |i, j| (i + 2 * j) as f64 - 3.0));
                let m = g.mul(out, w)?;
                Ok(g.sum(m))
            },
            &[init_uniform(4, 5, 0.5, &mut r)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
