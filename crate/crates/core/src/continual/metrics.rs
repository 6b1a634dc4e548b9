use crate::error::{CoreError, Result};

/// Highest snapshot success and the first snapshot reaching it.
pub fn compute_fwt(snapshots: &[f64]) -> Result<(f64, usize)> {
    if snapshots.is_empty() {
        return Err(CoreError::Contract("forward transfer needs at least one snapshot".into()));
    }
    let mut best = 0;
    for (i, &v) in snapshots.iter().enumerate() {
        if v > snapshots[best] {
            best = i;
        }
    }
    Ok((snapshots[best], best))
}

/// Mean change on earlier tasks: `(1/(k−1)) Σ (S_i − F_i)` over the
/// `k − 1` tasks before the current one.
pub fn compute_bwt(success: &[f64], fwt: &[f64]) -> Result<f64> {
    if success.is_empty() {
        return Err(CoreError::Contract("backward transfer is undefined for the first task".into()));
    }
    if success.len() != fwt.len() {
        return Err(CoreError::Contract(format!(
            "{} success entries against {} forward-transfer entries",
            success.len(),
            fwt.len()
        )));
    }
    let total: f64 = success.iter().zip(fwt).map(|(s, f)| s - f).sum();
    Ok(total / success.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fwt_examples() {
        assert_eq!(compute_fwt(&[0.2, 0.5, 0.4]).unwrap(), (0.5, 1));
        assert_eq!(compute_fwt(&[0.7]).unwrap(), (0.7, 0));
        assert_eq!(compute_fwt(&[0.0, 0.0]).unwrap(), (0.0, 0));
        assert!(compute_fwt(&[]).is_err());
    }

    #[test]
    fn bwt_examples() {
        let b = compute_bwt(&[0.5, 0.7], &[0.6, 0.8]).unwrap();
        assert!((b + 0.1).abs() < 1e-12);
        assert_eq!(compute_bwt(&[0.3, 0.9], &[0.3, 0.9]).unwrap(), 0.0);
        assert!(compute_bwt(&[], &[]).is_err());
        assert!(compute_bwt(&[0.1], &[0.1, 0.2]).is_err());
    }
}
