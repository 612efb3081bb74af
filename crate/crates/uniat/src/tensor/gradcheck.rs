//! Central finite-difference gradient checking.
//!
//! `finite_diff_check` is the umbrella oracle for every adjoint rule in
//! this crate; `primitive_checks` sweeps it over all tape primitives and
//! a few deep compositions, and backs the `grad-check` CLI command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{CeRow, Tape, Tensor, TensorId};

/// Compare the analytic gradient of a scalar-valued function against
/// central finite differences, coordinate by coordinate.
///
/// `f` rebuilds the graph from scratch on every call (the tape passed in
/// is always fresh). Returns the max over coordinates of
/// |analytic − numeric| / (|analytic| + |numeric| + 1e-12).
pub fn finite_diff_check<F, B>(f: B, x: &Tensor<F>, step: F) -> Result<F>
where
    F: Scalar,
    B: Fn(&mut Tape<F>, TensorId) -> Result<TensorId>,
{
    finite_diff_check_tampered(f, x, step, None)
}

/// `finite_diff_check` with an optional hook that corrupts the analytic
/// gradient before comparison. Fault-injection instrumentation: a correct
/// adjoint plus a tamper hook must register as a failure.
pub fn finite_diff_check_tampered<F, B>(
    f: B,
    x: &Tensor<F>,
    step: F,
    tamper: Option<&dyn Fn(&mut [F])>,
) -> Result<F>
where
    F: Scalar,
    B: Fn(&mut Tape<F>, TensorId) -> Result<TensorId>,
{
    if step <= F::zero() {
        return Err(Error::Config(
            "finite difference step must be positive".into(),
        ));
    }
    let eval = |data: &[F]| -> Result<F> {
        let mut tape = Tape::new();
        let probe = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        let id = tape.leaf(&probe);
        let out = f(&mut tape, id)?;
        if tape.numel(out) != 1 {
            return Err(Error::Tape(
                "finite_diff_check requires a scalar-valued function".into(),
            ));
        }
        Ok(tape.value(out)[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let mut watched = x.clone();
    watched.requires_grad = true;
    let id = tape.leaf(&watched);
    let out = f(&mut tape, id)?;
    if tape.numel(out) != 1 {
        return Err(Error::Tape(
            "finite_diff_check requires a scalar-valued function".into(),
        ));
    }
    tape.backward(out)?;
    let mut analytic: Vec<F> = match tape.grad(id) {
        Some(g) => g.to_vec(),
        None => vec![F::zero(); x.numel()],
    };
    if let Some(t) = tamper {
        t(&mut analytic);
    }

    // Numeric pass.
    let mut data = x.data().to_vec();
    let tiny = F::real(1e-12);
    let two = F::real(2.0);
    let mut worst = F::zero();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + step;
        let up = eval(&data)?;
        data[i] = orig - step;
        let down = eval(&data)?;
        data[i] = orig;
        let numeric = (up - down) / (two * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + tiny);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// One line of a gradient-check report.
#[derive(Debug, Clone)]
pub struct CheckEntry<F> {
    pub name: &'static str,
    pub max_rel_err: F,
}

fn randn<F: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<F> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| F::real(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Finite-difference every differentiable tape primitive plus three
/// compositions of depth ≥ 3, at the given step. When `corrupt` names an
/// entry, that entry's analytic gradient is perturbed before comparison
/// (fault injection for testing the checker itself).
pub fn primitive_checks<F: Scalar>(step: F, corrupt: Option<&str>) -> Result<Vec<CheckEntry<F>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut entries: Vec<CheckEntry<F>> = Vec::new();

    let mut push = |name: &'static str, errs: Vec<F>| {
        let worst = errs
            .into_iter()
            .fold(F::zero(), |a, b| if b > a { b } else { a });
        entries.push(CheckEntry {
            name,
            max_rel_err: worst,
        });
    };

    // Helper running one check with the tamper hook wired to `corrupt`.
    macro_rules! check {
        ($name:expr, $x:expr, $f:expr) => {{
            let hook: Option<&dyn Fn(&mut [F])> = if corrupt == Some($name) {
                Some(&|g: &mut [F]| {
                    if !g.is_empty() {
                        g[0] += F::real(0.05);
                    }
                })
            } else {
                None
            };
            finite_diff_check_tampered($f, &$x, step, hook)?
        }};
    }

    // matmul: gradient w.r.t. both factors.
    {
        let a = randn::<F>(&mut rng, vec![3, 4]);
        let b = randn::<F>(&mut rng, vec![4, 2]);
        let e1 = check!("matmul", a, |t: &mut Tape<F>, x| {
            let bid = t.leaf(&b);
            let y = t.matmul(x, bid)?;
            Ok(t.sum(y))
        });
        let e2 = check!("matmul", b, |t: &mut Tape<F>, x| {
            let aid = t.leaf(&a);
            let y = t.matmul(aid, x)?;
            Ok(t.sum(y))
        });
        push("matmul", vec![e1, e2]);
    }

    // bmm, plain and transposed.
    {
        let a = randn::<F>(&mut rng, vec![2, 3, 4]);
        let b = randn::<F>(&mut rng, vec![2, 4, 2]);
        let bt = randn::<F>(&mut rng, vec![2, 2, 4]);
        let e1 = check!("bmm", a, |t: &mut Tape<F>, x| {
            let bid = t.leaf(&b);
            let y = t.bmm(x, bid, false)?;
            Ok(t.sum(y))
        });
        let e2 = check!("bmm", b, |t: &mut Tape<F>, x| {
            let aid = t.leaf(&a);
            let y = t.bmm(aid, x, false)?;
            Ok(t.sum(y))
        });
        let e3 = check!("bmm", bt, |t: &mut Tape<F>, x| {
            let aid = t.leaf(&a);
            let y = t.bmm(aid, x, true)?;
            Ok(t.sum(y))
        });
        push("bmm", vec![e1, e2, e3]);
    }

    // Elementwise ops.
    {
        let x = randn::<F>(&mut rng, vec![3, 5]);
        let other = randn::<F>(&mut rng, vec![3, 5]);
        let e_add = check!("add", x, |t: &mut Tape<F>, x| {
            let o = t.leaf(&other);
            let y = t.add(x, o)?;
            Ok(t.sum(y))
        });
        push("add", vec![e_add]);
        let e_mul = check!("mul", x, |t: &mut Tape<F>, x| {
            let o = t.leaf(&other);
            let y = t.mul(x, o)?;
            Ok(t.sum(y))
        });
        push("mul", vec![e_mul]);
        let e_scale = check!("scale", x, |t: &mut Tape<F>, x| {
            let y = t.scale(x, F::real(-1.7));
            Ok(t.sum(y))
        });
        push("scale", vec![e_scale]);
        let e_lc = check!("linear_comb", x, |t: &mut Tape<F>, x| {
            let o = t.leaf(&other);
            let y = t.linear_comb(&[(x, F::real(0.3)), (o, F::real(-2.0)), (x, F::real(1.1))])?;
            Ok(t.sum(y))
        });
        push("linear_comb", vec![e_lc]);
        let e_gelu = check!("gelu", x, |t: &mut Tape<F>, x| {
            let y = t.gelu(x);
            Ok(t.sum(y))
        });
        push("gelu", vec![e_gelu]);
    }

    // softmax: plain sum is gradient-free, so weight the outputs.
    {
        let x = randn::<F>(&mut rng, vec![3, 4]);
        let w = randn::<F>(&mut rng, vec![3, 4]);
        let e = check!("softmax", x, |t: &mut Tape<F>, x| {
            let y = t.softmax(x, 1)?;
            let wid = t.leaf(&w);
            let z = t.mul(y, wid)?;
            Ok(t.sum(z))
        });
        push("softmax", vec![e]);
    }

    // layernorm: x, gain, bias.
    {
        let x = randn::<F>(&mut rng, vec![2, 8]);
        let gain = randn::<F>(&mut rng, vec![8]);
        let bias = randn::<F>(&mut rng, vec![8]);
        let w = randn::<F>(&mut rng, vec![2, 8]);
        let eps = F::real(1e-5);
        let e1 = check!("layernorm", x, |t: &mut Tape<F>, x| {
            let g = t.leaf(&gain);
            let b = t.leaf(&bias);
            let y = t.layernorm(x, g, b, eps)?;
            let wid = t.leaf(&w);
            let z = t.mul(y, wid)?;
            Ok(t.sum(z))
        });
        let e2 = check!("layernorm", gain, |t: &mut Tape<F>, g| {
            let xid = t.leaf(&x);
            let b = t.leaf(&bias);
            let y = t.layernorm(xid, g, b, eps)?;
            let wid = t.leaf(&w);
            let z = t.mul(y, wid)?;
            Ok(t.sum(z))
        });
        let e3 = check!("layernorm", bias, |t: &mut Tape<F>, b| {
            let xid = t.leaf(&x);
            let g = t.leaf(&gain);
            let y = t.layernorm(xid, g, b, eps)?;
            let wid = t.leaf(&w);
            let z = t.mul(y, wid)?;
            Ok(t.sum(z))
        });
        push("layernorm", vec![e1, e2, e3]);
    }

    // batchnorm (training mode): x, gain, bias.
    {
        let x = randn::<F>(&mut rng, vec![6, 4]);
        let gain = randn::<F>(&mut rng, vec![4]);
        let bias = randn::<F>(&mut rng, vec![4]);
        let w = randn::<F>(&mut rng, vec![6, 4]);
        let eps = F::real(1e-5);
        let e1 = check!("batchnorm", x, |t: &mut Tape<F>, x| {
            let g = t.leaf(&gain);
            let b = t.leaf(&bias);
            let (y, _, _) = t.batchnorm(x, g, b, eps)?;
            let wid = t.leaf(&w);
            let z = t.mul(y, wid)?;
            Ok(t.sum(z))
        });
        let e2 = check!("batchnorm", gain, |t: &mut Tape<F>, g| {
            let xid = t.leaf(&x);
            let b = t.leaf(&bias);
            let (y, _, _) = t.batchnorm(xid, g, b, eps)?;
            let wid = t.leaf(&w);
            let z = t.mul(y, wid)?;
            Ok(t.sum(z))
        });
        push("batchnorm", vec![e1, e2]);
    }

    // Structure ops.
    {
        let x = randn::<F>(&mut rng, vec![3, 4]);
        let w6 = randn::<F>(&mut rng, vec![6, 4]);
        let e_bias = {
            let m = randn::<F>(&mut rng, vec![5, 4]);
            let bias = randn::<F>(&mut rng, vec![4]);
            let e = check!("row_bias_add", bias, |t: &mut Tape<F>, b| {
                let mid = t.leaf(&m);
                let y = t.row_bias_add(mid, b)?;
                let y = t.gelu(y);
                Ok(t.sum(y))
            });
            e
        };
        push("row_bias_add", vec![e_bias]);

        let scale: Vec<F> = (0..4).map(|i| F::real(0.5 + i as f64)).collect();
        let shift: Vec<F> = (0..4).map(|i| F::real(-1.0 + i as f64)).collect();
        let e_col = check!("col_affine", x, |t: &mut Tape<F>, x| {
            let y = t.col_affine(x, scale.clone(), shift.clone())?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        });
        push("col_affine", vec![e_col]);

        // reindex: transpose plus a repeated row.
        let map: Vec<usize> = {
            let mut m = Vec::new();
            for j in 0..4 {
                for i in 0..3 {
                    m.push(i * 4 + j);
                }
            }
            m.extend([0usize, 1, 2, 3]); // repeat row 0
            m
        };
        let e_ri = check!("reindex", x, |t: &mut Tape<F>, x| {
            let y = t.reindex(x, map.clone(), vec![4, 4])?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        });
        push("reindex", vec![e_ri]);

        let e_sc = check!("scatter_rows", x, |t: &mut Tape<F>, x| {
            let y = t.scatter_rows(x, vec![4, 0, 2], 6)?;
            let w_id = t.leaf(&w6);
            let z = t.mul(y, w_id)?;
            Ok(t.sum(z))
        });
        push("scatter_rows", vec![e_sc]);

        let e_cc = check!("concat_rows", x, |t: &mut Tape<F>, x| {
            let y = t.scale(x, F::real(2.0));
            let z = t.concat_rows(&[x, y])?;
            let w_id = t.leaf(&w6);
            let z = t.mul(z, w_id)?;
            Ok(t.sum(z))
        });
        push("concat_rows", vec![e_cc]);

        let s = randn::<F>(&mut rng, vec![3]);
        let e_rs1 = check!("row_scale", x, |t: &mut Tape<F>, x| {
            let sid = t.leaf(&s);
            let y = t.row_scale(x, sid)?;
            Ok(t.sum(y))
        });
        let e_rs2 = check!("row_scale", s, |t: &mut Tape<F>, sid| {
            let xid = t.leaf(&x);
            let y = t.row_scale(xid, sid)?;
            Ok(t.sum(y))
        });
        push("row_scale", vec![e_rs1, e_rs2]);

        let e_tk = check!("topk_mask", x, |t: &mut Tape<F>, x| {
            let y = t.topk_mask(x, 2)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        });
        push("topk_mask", vec![e_tk]);

        let e_sum = check!("sum", x, |t: &mut Tape<F>, x| Ok(t.sum(x)));
        push("sum", vec![e_sum]);
    }

    // restricted_ce over random logits and negative sets.
    {
        let logits = randn::<F>(&mut rng, vec![4, 6]);
        let rows = vec![
            CeRow { gt: 0, negatives: vec![2, 4] },
            CeRow { gt: 3, negatives: vec![0, 1, 2, 4, 5] },
            CeRow { gt: 5, negatives: vec![] },
            CeRow { gt: 2, negatives: vec![1] },
        ];
        let e = check!("restricted_ce", logits, |t: &mut Tape<F>, x| {
            let y = t.restricted_ce(x, rows.clone())?;
            Ok(t.sum(y))
        });
        push("restricted_ce", vec![e]);
    }

    // Three compositions of depth ≥ 3 with mixed primitives.
    {
        let x = randn::<F>(&mut rng, vec![3, 8]);
        let gain = randn::<F>(&mut rng, vec![8]);
        let bias = randn::<F>(&mut rng, vec![8]);
        let w = randn::<F>(&mut rng, vec![8, 4]);
        let eps = F::real(1e-5);
        let e_a = check!("composite_ln_matmul_gelu", x, |t: &mut Tape<F>, x| {
            let g = t.leaf(&gain);
            let b = t.leaf(&bias);
            let y = t.layernorm(x, g, b, eps)?;
            let wid = t.leaf(&w);
            let y = t.matmul(y, wid)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        });
        push("composite_ln_matmul_gelu", vec![e_a]);

        let w2 = randn::<F>(&mut rng, vec![8, 5]);
        let mix = randn::<F>(&mut rng, vec![3, 5]);
        let e_b = check!("composite_matmul_softmax_mul", x, |t: &mut Tape<F>, x| {
            let wid = t.leaf(&w2);
            let y = t.matmul(x, wid)?;
            let y = t.softmax(y, 1)?;
            let m = t.leaf(&mix);
            let y = t.mul(y, m)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        });
        push("composite_matmul_softmax_mul", vec![e_b]);

        let s3 = randn::<F>(&mut rng, vec![6]);
        let e_c = check!("composite_concat_ln_rowscale", x, |t: &mut Tape<F>, x| {
            let two = t.scale(x, F::real(0.5));
            let y = t.concat_rows(&[x, two])?;
            let g = t.leaf(&gain);
            let b = t.leaf(&bias);
            let y = t.layernorm(y, g, b, eps)?;
            let sid = t.leaf(&s3);
            let y = t.row_scale(y, sid)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        });
        push("composite_concat_ln_rowscale", vec![e_c]);
    }

    Ok(entries)
}
