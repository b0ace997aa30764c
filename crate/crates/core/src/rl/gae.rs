/// Generalized advantage estimates and returns for one environment stream.
///
/// `values[t]` is the (unnormalized) estimate for the state before step `t`
/// and `bootstrap` the estimate after the last step. A done at `t` cuts both
/// the bootstrap and the advantage recursion.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    tau: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "GAE inputs must share a length");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        next_adv = delta + gamma * tau * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit (population) variance; a constant
/// or single-element input is only centred.
pub fn standardize(xs: &mut [f64]) {
    let n = xs.len();
    if n == 0 {
        return;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter_mut().for_each(|x| *x -= mean);
    let std = (xs.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    if n > 1 && std > 1e-12 {
        xs.iter_mut().for_each(|x| *x /= std);
    }
}
