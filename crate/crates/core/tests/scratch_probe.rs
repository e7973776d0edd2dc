use growbench_core::experiment::{
    make_task, run_training, BatchMode, RunConfig, StudentInit,
};
use growbench_core::grow::{GrowthDirection, GrowthMethod, GrowthPlan, NormPolicy};

#[test]
fn probe_fine_band() {
    let task = make_task::<f64>(20, 10, 10, 1000, 1, 2).unwrap();
    for lr in [0.42, 0.45, 0.48, 0.5, 0.55] {
        for (bname, batch) in [("full", BatchMode::Full)] {
            let plan = GrowthPlan::schedule(
                200, 200, 5, 0, 1,
                GrowthMethod::Random,
                GrowthDirection::IncomingZero,
                NormPolicy::MeanExisting,
                1e-4,
            ).unwrap();
            let mut wins = 0;
            let mut pairs = String::new();
            for seed in 0..10u64 {
                let mut cfg = RunConfig::new(5, 1500, plan.clone(), seed);
                cfg.lr = lr;
                cfg.student_init = StudentInit::Glorot;
                cfg.batch = batch;
                let gm = run_training(&task, &cfg.with_method(GrowthMethod::GradMax)).unwrap();
                let rd = run_training(&task, &cfg.with_method(GrowthMethod::Random)).unwrap();
                let gl = gm.log.steps.last().unwrap().loss;
                let rl = rd.log.steps.last().unwrap().loss;
                if gl < rl { wins += 1; }
                pairs.push_str(&format!(" {gl:.0e}/{rl:.0e}"));
            }
            println!("lr {lr} {bname}: wins {wins}/10 |{pairs}");
        }
    }
}
