//! Forward corruption and the two reverse updates on a toy signal.

use rem_diffusion::schedule::DiffusionSchedule;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schedule = DiffusionSchedule::linear(1000, 1e-4, 0.02)?;
    for t in [1, 10, 100, 250, 500, 750, 1000] {
        let ab = schedule.alpha_bar(t)?;
        println!("t={t:4}  beta={:.5}  alpha_bar={ab:.6}  signal={:.4}", schedule.beta(t)?, ab.sqrt());
    }

    let x0 = vec![-1.0, -0.5, 0.0, 0.5, 1.0];
    let eps = vec![0.3, -1.2, 0.8, 0.1, -0.4];
    let xt = schedule.q_sample(&x0, 600, &eps)?;
    println!("x_600           {xt:.4?}");
    // with the true noise, one implicit step to t=0 lands on x0
    println!("ddim 600 -> 0   {:.4?}", schedule.ddim_step(&xt, &eps, 600, 0)?);
    println!("ancestral step  {:.4?}", schedule.reverse_step(&xt, &eps, 600, None)?);
    println!("ddim 50 pairs   {:?}", &schedule.ddim_pairs(50)?[..4]);
    Ok(())
}
