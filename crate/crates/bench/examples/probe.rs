use echopt::ech::{self, EchConfig};
use echopt_bench::problems::BenchProblemSpec;

fn main() {
    let prob = BenchProblemSpec::nfz5().build().unwrap();
    let mut cfg = EchConfig::default();
    cfg.solver.max_iterations = 600;
    cfg.solver.log_iterations = true;
    let guess = prob.initial_guess();
    match ech::run(&prob.ocp, &prob.mesh, &guess, &cfg) {
        Ok(out) => {
            println!("stop={:?} rounds={}", out.stop, out.iterations.len());
            for (i, it) in out.iterations.iter().enumerate() {
                println!(
                    "  round {i}: K={} nlp_iters={} obj={:.6} eta={:.2e} viol={:.2e} warm_viol={:.2e} afp={}",
                    it.intervals,
                    it.nlp_iterations,
                    it.objective,
                    it.max_eta,
                    it.max_violation,
                    it.warm_start_violation,
                    it.afp_invoked,
                );
            }
        }
        Err(e) => println!("error: {e}"),
    }
}
