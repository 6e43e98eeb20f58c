//! Contrastive losses, as graph ops for training and as plain functions for evaluation.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// `a · bᵀ` for two `[N, d]` / `[M, d]` graph values.
pub fn matmul_transposed<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        bail!(Shape, "cannot multiply {:?} by the transpose of {:?}", sa, sb);
    }
    let a3 = g.reshape(a, &[1, sa[0], sa[1]])?;
    let b3 = g.reshape(b, &[1, sb[0], sb[1]])?;
    let out = g.batch_matmul(a3, b3, true)?;
    g.reshape(out, &[sa[0], sb[0]])
}

/// Image-to-text logits: `scale · normalize(img) · normalize(txt)ᵀ`.
pub fn logits_graph<T: Real>(g: &mut Graph<'_, T>, image: Var, text: Var, scale: Var) -> Result<Var> {
    let img = g.l2_normalize(image)?;
    let txt = g.l2_normalize(text)?;
    let sim = matmul_transposed(g, img, txt)?;
    g.mul_scalar(sim, scale)
}

/// `½ (CE(L, diag) + CE(Lᵀ, diag))` over a square logit matrix.
pub fn clip_loss_graph<T: Real>(g: &mut Graph<'_, T>, logits: Var) -> Result<Var> {
    let &[n, m] = g.shape(logits) else {
        bail!(Shape, "clip_loss expects a matrix, got {:?}", g.shape(logits));
    };
    if n != m {
        bail!(Shape, "clip_loss expects a square matrix, got {}x{}", n, m);
    }
    if n == 0 {
        bail!(Shape, "clip_loss of an empty batch");
    }
    if !g.value(logits).is_finite() {
        bail!(Numeric, "clip_loss logits contain non-finite entries");
    }
    let targets: Vec<usize> = (0..n).collect();
    let rows = g.cross_entropy(logits, &targets)?;
    let t = g.permute(logits, &[1, 0])?;
    let cols = g.cross_entropy(t, &targets)?;
    let sum = g.add(rows, cols)?;
    Ok(g.scale(sum, 0.5))
}

/// NT-Xent over `2N` views: each view's positive is its counterpart, every
/// other view (never itself) is a negative.
pub fn nt_xent_graph<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var, temperature: f64) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa != sb || sa.len() != 2 {
        bail!(Shape, "views {:?} and {:?} must share one [N, d] shape", sa, sb);
    }
    let n = sa[0];
    if n < 2 {
        bail!(Validation, "NT-Xent needs at least 2 pairs for negatives, got {}", n);
    }
    if !(temperature > 0.0) {
        bail!(Validation, "temperature must be positive, got {}", temperature);
    }
    let za = g.l2_normalize(a)?;
    let zb = g.l2_normalize(b)?;
    let z = g.concat_rows(za, zb)?;
    let sim = matmul_transposed(g, z, z)?;
    let sim = g.scale(sim, 1.0 / temperature);
    let sim = g.mask_diagonal(sim)?;
    let targets: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    g.cross_entropy(sim, &targets)
}

/// `clip + w · ssl`.
pub fn slip_combine_graph<T: Real>(g: &mut Graph<'_, T>, clip: Var, ssl: Var, ssl_weight: f64) -> Result<Var> {
    check_weight(ssl_weight)?;
    let w = g.scale(ssl, ssl_weight);
    g.add(clip, w)
}

fn check_weight(w: f64) -> Result<()> {
    if !(w >= 0.0) || !w.is_finite() {
        bail!(Validation, "ssl_weight must be a nonnegative number, got {}", w);
    }
    Ok(())
}

fn eval_scalar(build: impl FnOnce(&mut Graph<'_, f64>) -> Result<Var>) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let v = build(&mut g)?;
    Ok(g.value(v).data()[0])
}

/// Symmetric contrastive loss of an image-to-text logit matrix.
pub fn clip_loss(logits: &Tensor<f64>) -> Result<f64> {
    eval_scalar(|g| {
        let l = g.input(logits.clone());
        clip_loss_graph(g, l)
    })
}

/// Normalized-temperature cross-entropy between two views.
pub fn ssl_nt_xent_loss(view_a: &Tensor<f64>, view_b: &Tensor<f64>, temperature: f64) -> Result<f64> {
    eval_scalar(|g| {
        let a = g.input(view_a.clone());
        let b = g.input(view_b.clone());
        nt_xent_graph(g, a, b, temperature)
    })
}

pub fn slip_loss(clip_term: f64, ssl_term: f64, ssl_weight: f64) -> Result<f64> {
    check_weight(ssl_weight)?;
    if !clip_term.is_finite() || !ssl_term.is_finite() {
        bail!(Numeric, "slip_loss terms must be finite");
    }
    Ok(clip_term + ssl_weight * ssl_term)
}
