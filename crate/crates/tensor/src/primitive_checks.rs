//! Finite-difference checks of every graph primitive at random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{gradient_check, Graph, Result, Tensor, Var};

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-6;
pub const TOL_ATTN_CONV: f64 = 1e-5;

/// Worst relative error of one primitive over a number of random points.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub tolerance: f64,
    pub worst: f64,
}

impl PrimitiveCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// Contracts a non-scalar output with fixed random weights so every output
/// coordinate contributes to the checked gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let r = random(g.shape(y), &mut rng, 1.0);
    let rv = g.constant(r);
    let p = g.mul(y, rv)?;
    g.sum(p)
}

type Case = fn(&mut ChaCha8Rng, u64) -> Result<f64>;

fn check_linear(rng: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    let x = random(&[3, 5], rng, 1.0);
    let w = random(&[4, 5], rng, 1.0);
    let b = random(&[4], rng, 1.0);
    let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
    let ex = gradient_check(
        |g, x| {
            let w = g.constant(wc.clone());
            let b = g.constant(bc.clone());
            let y = g.linear(x, w, Some(b))?;
            project(g, y, s)
        },
        &x,
        H,
    )
    ?;
    let ew = gradient_check(
        |g, w| {
            let x = g.constant(xc.clone());
            let b = g.constant(bc.clone());
            let y = g.linear(x, w, Some(b))?;
            project(g, y, s)
        },
        &w,
        H,
    )
    ?;
    let eb = gradient_check(
        |g, b| {
            let x = g.constant(xc.clone());
            let w = g.constant(wc.clone());
            let y = g.linear(x, w, Some(b))?;
            project(g, y, s)
        },
        &b,
        H,
    )
    ?;
    Ok(ex.max(ew).max(eb))
}

fn check_embedding(rng: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    let table = random(&[6, 4], rng, 1.0);
    let idx: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
    gradient_check(
        |g, t| {
            let y = g.embedding(t, &idx)?;
            project(g, y, s)
        },
        &table,
        H,
    )
    
}

fn check_layer_norm(rng: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    let x = random(&[3, 6], rng, 2.0);
    let gamma = random(&[6], rng, 1.5);
    let beta = random(&[6], rng, 1.0);
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    let ex = gradient_check(
        |g, x| {
            let ga = g.constant(gc.clone());
            let be = g.constant(bc.clone());
            let y = g.layer_norm(x, ga, be, 1e-5)?;
            project(g, y, s)
        },
        &x,
        H,
    )
    ?;
    let eg = gradient_check(
        |g, ga| {
            let x = g.constant(xc.clone());
            let be = g.constant(bc.clone());
            let y = g.layer_norm(x, ga, be, 1e-5)?;
            project(g, y, s)
        },
        &gamma,
        H,
    )
    ?;
    let eb = gradient_check(
        |g, be| {
            let x = g.constant(xc.clone());
            let ga = g.constant(gc.clone());
            let y = g.layer_norm(x, ga, be, 1e-5)?;
            project(g, y, s)
        },
        &beta,
        H,
    )
    ?;
    Ok(ex.max(eg).max(eb))
}

fn check_softmax(rng: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    let x = random(&[2, 5], rng, 2.0);
    gradient_check(
        |g, x| {
            let y = g.softmax(x)?;
            project(g, y, s)
        },
        &x,
        H,
    )
    
}

fn check_silu(rng: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    let x = random(&[7], rng, 3.0);
    gradient_check(
        |g, x| {
            let y = g.silu(x)?;
            project(g, y, s)
        },
        &x,
        H,
    )
    
}

fn check_tanh(rng: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    let x = random(&[7], rng, 3.0);
    gradient_check(
        |g, x| {
            let y = g.tanh(x)?;
            project(g, y, s)
        },
        &x,
        H,
    )
    
}

fn check_conv2d(rng: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    let x = random(&[2, 6, 5], rng, 1.0);
    let w = random(&[3, 2, 3, 3], rng, 1.0);
    let b = random(&[3], rng, 1.0);
    let stride = 1 + (s as usize % 2);
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    let ex = gradient_check(
        |g, x| {
            let w = g.constant(wc.clone());
            let b = g.constant(bc.clone());
            let y = g.conv2d(x, w, Some(b), stride, 1)?;
            project(g, y, s)
        },
        &x,
        H,
    )
    ?;
    let ew = gradient_check(
        |g, w| {
            let x = g.constant(xc.clone());
            let b = g.constant(bc.clone());
            let y = g.conv2d(x, w, Some(b), stride, 1)?;
            project(g, y, s)
        },
        &w,
        H,
    )
    ?;
    let eb = gradient_check(
        |g, b| {
            let x = g.constant(xc.clone());
            let w = g.constant(wc.clone());
            let y = g.conv2d(x, w, Some(b), stride, 1)?;
            project(g, y, s)
        },
        &b,
        H,
    )
    ?;
    Ok(ex.max(ew).max(eb))
}

fn check_max_pool2d(rng: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    let x = random(&[2, 4, 6], rng, 1.0);
    gradient_check(
        |g, x| {
            let y = g.max_pool2d(x, 2, 2)?;
            project(g, y, s)
        },
        &x,
        H,
    )
    
}

fn check_mse(rng: &mut ChaCha8Rng, _: u64) -> Result<f64> {
    let p = random(&[4, 3], rng, 2.0);
    let t = random(&[4, 3], rng, 2.0);
    let (pc, tc) = (p.clone(), t.clone());
    let ep = gradient_check(
        |g, p| {
            let t = g.constant(tc.clone());
            g.mse(p, t)
        },
        &p,
        H,
    )
    ?;
    let et = gradient_check(
        |g, t| {
            let p = g.constant(pc.clone());
            g.mse(p, t)
        },
        &t,
        H,
    )
    ?;
    Ok(ep.max(et))
}

fn check_cross_entropy(rng: &mut ChaCha8Rng, _: u64) -> Result<f64> {
    let l = random(&[6], rng, 3.0);
    let target = rng.random_range(0..6);
    gradient_check(|g, l| g.cross_entropy(l, target), &l, H)
}

fn check_causal_attention(rng: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    let heads = 1 + (s as usize % 2);
    let x = random(&[5, 3 * 4], rng, 1.0);
    gradient_check(
        |g, x| {
            let y = g.causal_attention(x, heads)?;
            project(g, y, s)
        },
        &x,
        H,
    )
    
}

fn check_mse_linear(rng: &mut ChaCha8Rng, _: u64) -> Result<f64> {
    let x = random(&[4, 3], rng, 1.0);
    let w = random(&[2, 3], rng, 1.0);
    let t = random(&[4, 2], rng, 1.0);
    gradient_check(
        |g, x| {
            let w = g.constant(w.clone());
            let t = g.constant(t.clone());
            let y = g.linear(x, w, None)?;
            g.mse(y, t)
        },
        &x,
        H,
    )
    
}

fn check_concat_slice_reshape(rng: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    let a = random(&[2, 3], rng, 1.0);
    let b = random(&[4, 3], rng, 1.0);
    gradient_check(
        |g, a| {
            let bv = g.constant(b.clone());
            let cat = g.concat_rows(&[a, bv, a])?;
            let part = g.slice_rows(cat, 1, 4)?;
            let wide = g.concat_cols(&[part, part])?;
            let flat = g.reshape(wide, &[24])?;
            let sc = g.scale(flat, 0.5)?;
            let m = g.mean(sc)?;
            let p = project(g, flat, s)?;
            let sq = g.mul(m, m)?;
            let d = g.sub(p, sq)?;
            g.add(d, m)
        },
        &a,
        H,
    )
    
}

const CASES: &[(&str, f64, Case)] = &[
    ("linear", TOL, check_linear),
    ("embedding", TOL, check_embedding),
    ("layer_norm", TOL, check_layer_norm),
    ("softmax", TOL, check_softmax),
    ("silu", TOL, check_silu),
    ("tanh", TOL, check_tanh),
    ("conv2d", TOL_ATTN_CONV, check_conv2d),
    ("max_pool2d", TOL, check_max_pool2d),
    ("mse", TOL, check_mse),
    ("cross_entropy", TOL, check_cross_entropy),
    ("causal_attention", TOL_ATTN_CONV, check_causal_attention),
    ("mse(linear)", TOL, check_mse_linear),
    ("concat/slice/reshape", TOL, check_concat_slice_reshape),
];

/// Names of all checked primitives.
pub fn primitive_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.0).collect()
}

/// Runs the named primitive check at `points` random points.
pub fn check_primitive(name: &str, points: u64) -> Result<PrimitiveCheck> {
    let (name, tolerance, case) = CASES
        .iter()
        .find(|c| c.0 == name)
        .copied()
        .ok_or_else(|| crate::TensorError::Contract(format!("no primitive check named `{name}`")))?;
    let mut worst: f64 = 0.0;
    for point in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        worst = worst.max(case(&mut rng, point)?);
    }
    Ok(PrimitiveCheck { name, tolerance, worst })
}

/// Every primitive check at `points` random points.
pub fn check_all_primitives(points: u64) -> Result<Vec<PrimitiveCheck>> {
    CASES.iter().map(|c| check_primitive(c.0, points)).collect()
}
