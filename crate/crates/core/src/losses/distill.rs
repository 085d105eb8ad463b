//! Distillation terms against a frozen teacher network.

use super::metric::check_matrix;
use super::LossError;
use crate::tensor::Tensor;

/// Huber with unit threshold.
pub fn huber(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn huber_slope(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillValue {
    pub value: f64,
    /// Gradient w.r.t. the student rows, same layout as the input.
    pub grad: Vec<f64>,
    /// Angle instances counted in the mean.
    pub angles: usize,
    /// Angle instances dropped because a leg had zero length.
    pub skipped: usize,
}

/// Unit legs `(x_i - x_j) / |x_i - x_j|` from middle point `j`, with the
/// leg lengths. Zero legs yield `None`.
fn legs(x: &Tensor, j: usize) -> Vec<Option<(Vec<f64>, f64)>> {
    let mid = x.row(j);
    (0..x.rows())
        .map(|i| {
            if i == j {
                return None;
            }
            let e: Vec<f64> = x.row(i).iter().zip(mid).map(|(a, b)| a - b).collect();
            let len = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            (len > 0.0).then(|| (e.into_iter().map(|v| v / len).collect(), len))
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relational angle distillation: for every middle point `j` and unordered
/// pair `{i, k}` of the other rows, compares the cosine of the angle at `j`
/// under teacher and student with a Huber penalty, averaged over all angle
/// instances. Requires at least three rows.
pub fn angle_distill_loss(teacher: &Tensor, student: &Tensor) -> Result<DistillValue, LossError> {
    let (n, _) = check_matrix("angle_distill_loss", teacher)?;
    let (ns, ds) = check_matrix("angle_distill_loss", student)?;
    if n != ns {
        return Err(LossError::Shape(format!("teacher has {n} rows, student {ns}")));
    }
    if n < 3 {
        return Err(LossError::TooFewRows { needed: 3, got: n });
    }
    let mut grad = vec![0.0; n * ds];
    let mut total = 0.0;
    let mut count = 0usize;
    let mut skipped = 0usize;
    // first pass: value and per-instance slopes, kept per middle point
    let mut slopes: Vec<Vec<(usize, usize, f64)>> = Vec::with_capacity(n);
    let mut student_legs = Vec::with_capacity(n);
    for j in 0..n {
        let lt = legs(teacher, j);
        let ls = legs(student, j);
        let mut here = Vec::new();
        for i in 0..n {
            for k in i + 1..n {
                if i == j || k == j {
                    continue;
                }
                match (&lt[i], &lt[k], &ls[i], &ls[k]) {
                    (Some(ti), Some(tk), Some(si), Some(sk)) => {
                        let diff = dot(&si.0, &sk.0) - dot(&ti.0, &tk.0);
                        total += huber(diff);
                        count += 1;
                        here.push((i, k, huber_slope(diff)));
                    }
                    _ => skipped += 1,
                }
            }
        }
        slopes.push(here);
        student_legs.push(ls);
    }
    if count == 0 {
        return Ok(DistillValue {
            value: 0.0,
            grad,
            angles: 0,
            skipped,
        });
    }
    let inv = 1.0 / count as f64;
    for (j, (here, ls)) in slopes.iter().zip(&student_legs).enumerate() {
        // G_i = sum_k w_ik u_k, accumulated per leg
        let mut g: Vec<Vec<f64>> = vec![Vec::new(); n];
        for &(i, k, w) in here {
            let w = w * inv;
            let (ui, uk) = (&ls[i].as_ref().expect("kept").0, &ls[k].as_ref().expect("kept").0);
            for (target, src) in [(i, uk), (k, ui)] {
                if g[target].is_empty() {
                    g[target] = vec![0.0; ds];
                }
                g[target].iter_mut().zip(src).for_each(|(a, b)| *a += w * b);
            }
        }
        for (i, gi) in g.iter().enumerate() {
            if gi.is_empty() {
                continue;
            }
            let (u, len) = ls[i].as_ref().expect("kept");
            let along = dot(gi, u);
            for d in 0..ds {
                let v = (gi[d] - along * u[d]) / len;
                grad[i * ds + d] += v;
                grad[j * ds + d] -= v;
            }
        }
    }
    Ok(DistillValue {
        value: total * inv,
        grad,
        angles: count,
        skipped,
    })
}

/// Temperature-softened cross-entropy `-sum p_t log p_s`, averaged over rows.
/// When the student has more columns than the teacher only the leading
/// teacher-width columns take part; the gradient of the rest is zero.
pub fn kd_distill_loss(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    temperature: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    let (n, kt) = check_matrix("kd_distill_loss", teacher_logits)?;
    let (ns, ks) = check_matrix("kd_distill_loss", student_logits)?;
    if n != ns || kt > ks || kt == 0 {
        return Err(LossError::Shape(format!(
            "teacher logits {:?} incompatible with student {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(LossError::Param(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut grad = vec![0.0; n * ks];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let soft = |row: &[f64]| {
        let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        scaled.into_iter().map(|v| v - lse).collect::<Vec<f64>>()
    };
    let mut total = 0.0;
    let scale = 1.0 / (n as f64 * temperature);
    for r in 0..n {
        let log_t = soft(teacher_logits.row(r));
        let log_s = soft(&student_logits.row(r)[..kt]);
        for c in 0..kt {
            let pt = log_t[c].exp();
            total -= pt * log_s[c];
            grad[r * ks + c] = scale * (log_s[c].exp() - pt);
        }
    }
    Ok((total / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::finite_diff_check;
    use rand::Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(r: &mut rng::ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(&[n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_teacher_and_student_give_zero() {
        let mut r = rng::seeded(1);
        let x = random(&mut r, 7, 5);
        let v = angle_distill_loss(&x, &x).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.grad.iter().all(|g| g.abs() < 1e-15));
        assert_eq!(v.angles, 7 * 15);
    }

    #[test]
    fn three_point_hand_value() {
        // teacher: right angle everywhere it matters, student: collinear
        let teacher = t(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]]);
        let student = t(&[&[1.0, 0.0], &[0.0, 0.0], &[2.0, 0.0]]);
        let v = angle_distill_loss(&teacher, &student).unwrap();
        // middle 1: cos_t = 0, cos_s = 1 -> 0.5
        // middle 0: legs (-1,0),(-1,1); cos_t = 1/sqrt2, legs (-1,0),(1,0): cos_s = -1
        // middle 2: legs (1,-1),(0,-1): cos_t = 1/sqrt2; legs (-1,0),(-2,0): cos_s = 1
        let s = 0.5f64.sqrt();
        let want = (0.5 + huber(-1.0 - s) + huber(1.0 - s)) / 3.0;
        assert!((v.value - want).abs() < 1e-12);
    }

    #[test]
    fn too_few_rows() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(matches!(angle_distill_loss(&x, &x), Err(LossError::TooFewRows { .. })));
    }

    #[test]
    fn zero_legs_are_skipped() {
        let teacher = t(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let student = t(&[&[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0], &[2.0, 2.0]]);
        let v = angle_distill_loss(&teacher, &student).unwrap();
        assert!(v.skipped > 0);
        assert_eq!(v.angles + v.skipped, 4 * 3);
        assert!(v.value.is_finite());
    }

    #[test]
    fn angle_gradient_matches_finite_differences() {
        let mut r = rng::seeded(2);
        for _ in 0..5 {
            let teacher = random(&mut r, 5, 4);
            let student = random(&mut r, 5, 4);
            let err = finite_diff_check(
                |p| {
                    let s = Tensor::new(&[5, 4], p.to_vec()).unwrap();
                    let v = angle_distill_loss(&teacher, &s).map_err(|e| e.to_string())?;
                    Ok((v.value, v.grad))
                },
                student.data(),
                1e-6,
                None,
            )
            .unwrap();
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn kd_uniform_teacher() {
        let teacher = Tensor::zeros(&[2, 4]);
        let student = Tensor::zeros(&[2, 4]);
        let (v, g) = kd_distill_loss(&teacher, &student, 2.0).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let mut r = rng::seeded(4);
        let teacher = random(&mut r, 3, 3);
        let student = random(&mut r, 3, 5);
        let err = finite_diff_check(
            |p| {
                let s = Tensor::new(&[3, 5], p.to_vec()).unwrap();
                kd_distill_loss(&teacher, &s, 2.0).map_err(|e| e.to_string())
            },
            student.data(),
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
