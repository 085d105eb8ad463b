use super::metric::check_matrix;
use super::LossError;
use crate::tensor::Tensor;

/// Keeps `log` finite when a reconstruction saturates.
const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeLossValue {
    pub value: f64,
    pub bce: f64,
    pub kl: f64,
    pub grad_reconstruction: Vec<f64>,
    pub grad_mu: Vec<f64>,
    pub grad_log_var: Vec<f64>,
}

/// Binary cross-entropy summed over features plus the Gaussian KL term
/// `1/2 sum(exp(log_var) + mu^2 - 1 - log_var)` summed over latent
/// dimensions, both averaged over the batch. `reconstruction` holds
/// probabilities.
pub fn vae_loss(
    reconstruction: &Tensor,
    target: &Tensor,
    mu: &Tensor,
    log_var: &Tensor,
) -> Result<VaeLossValue, LossError> {
    let (n, _) = check_matrix("vae_loss", reconstruction)?;
    let (nm, _) = check_matrix("vae_loss", mu)?;
    if reconstruction.shape() != target.shape() || mu.shape() != log_var.shape() || nm != n {
        return Err(LossError::Shape(format!(
            "vae_loss: reconstruction {:?}, target {:?}, mu {:?}, log_var {:?}",
            reconstruction.shape(),
            target.shape(),
            mu.shape(),
            log_var.shape()
        )));
    }
    if let Some(v) = target.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(LossError::Target(*v));
    }
    let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut bce = 0.0;
    let mut grad_reconstruction = Vec::with_capacity(target.numel());
    for (&p, &y) in reconstruction.data().iter().zip(target.data()) {
        let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        bce -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        let g = if p == q { (q - y) / (q * (1.0 - q)) } else { 0.0 };
        grad_reconstruction.push(inv * g);
    }
    let mut kl = 0.0;
    let mut grad_mu = Vec::with_capacity(mu.numel());
    let mut grad_log_var = Vec::with_capacity(mu.numel());
    for (&m, &lv) in mu.data().iter().zip(log_var.data()) {
        kl += 0.5 * (lv.exp() + m * m - 1.0 - lv);
        grad_mu.push(inv * m);
        grad_log_var.push(inv * 0.5 * (lv.exp() - 1.0));
    }
    Ok(VaeLossValue {
        value: (bce + kl) * inv,
        bce: bce * inv,
        kl: kl * inv,
        grad_reconstruction,
        grad_mu,
        grad_log_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn unit_mean_gives_half_per_dimension() {
        let mu = Tensor::full(&[1, 3], 1.0);
        let lv = Tensor::zeros(&[1, 3]);
        let target = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let v = vae_loss(&target, &target, &mu, &lv).unwrap();
        assert!((v.kl - 1.5).abs() < 1e-15);
        assert!(v.bce.abs() < 1e-9);
    }

    #[test]
    fn target_outside_unit_interval() {
        let t = Tensor::new(&[1, 1], vec![1.5]).unwrap();
        let z = Tensor::zeros(&[1, 1]);
        assert!(matches!(vae_loss(&z, &t, &z, &z), Err(LossError::Target(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::seeded(8);
        let (n, f, l) = (3, 4, 2);
        let target = Tensor::new(&[n, f], (0..n * f).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let mut params: Vec<f64> = (0..n * f).map(|_| r.random_range(0.1..0.9)).collect();
        params.extend((0..2 * n * l).map(|_| r.random_range(-1.0..1.0)));
        let err = finite_diff_check(
            |p| {
                let rec = Tensor::new(&[n, f], p[..n * f].to_vec()).unwrap();
                let mu = Tensor::new(&[n, l], p[n * f..n * f + n * l].to_vec()).unwrap();
                let lv = Tensor::new(&[n, l], p[n * f + n * l..].to_vec()).unwrap();
                let v = vae_loss(&rec, &target, &mu, &lv).map_err(|e| e.to_string())?;
                let mut g = v.grad_reconstruction;
                g.extend(v.grad_mu);
                g.extend(v.grad_log_var);
                Ok((v.value, g))
            },
            &params,
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 4), lv in prop::collection::vec(-5.0f64..5.0, 4)) {
            let mu = Tensor::new(&[2, 2], mu).unwrap();
            let lv = Tensor::new(&[2, 2], lv).unwrap();
            let z = Tensor::full(&[2, 1], 0.5);
            prop_assert!(vae_loss(&z, &z, &mu, &lv).unwrap().kl >= 0.0);
        }
    }
}
