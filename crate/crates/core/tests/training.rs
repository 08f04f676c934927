use distill::diffusion::{sample_action_sequence, train_diffusion, DiffusionConfig};
use distill::envs::{Env, EnvConfig, EnvId, ScriptedController};
use distill::pipeline::{filter_dataset, harvest, HarvestConfig, PipelineConfig};
use distill::ppo::{train_ppo, ScriptedPolicy};
use distill::trajstore::MIN_SUCCESS_EPISODES;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn success_rate(flags: &[bool]) -> f64 {
    flags.iter().filter(|s| **s).count() as f64 / flags.len() as f64
}

#[test]
fn ppo_success_rises_during_training() {
    let cfg = PipelineConfig::for_env(EnvId::ReachServe);
    let out = train_ppo(EnvId::ReachServe, EnvConfig::default(), &cfg.ppo, 0).unwrap();
    let flags: Vec<bool> = out.episodes.iter().map(|e| e.success).collect();
    assert!(flags.len() >= 200);
    let first = success_rate(&flags[..100]);
    let last = success_rate(&flags[flags.len() - 100..]);
    assert!(last > first, "first {first}, last {last}");
}

#[test]
fn partially_trained_policy_distills_toward_the_mouth() {
    let cfg = PipelineConfig::for_env(EnvId::ReachServe);
    let ppo = train_ppo(EnvId::ReachServe, EnvConfig::default(), &cfg.ppo, 3).unwrap();

    let collected = harvest(&ppo.policy, cfg.env(), &HarvestConfig::episodes(500), 3).unwrap();
    assert_eq!(collected.dataset.len(), 500);
    let recount = collected
        .dataset
        .iter()
        .filter(|t| t.steps.last().is_some_and(|s| s.success))
        .count();
    let (d_succ, summary) = filter_dataset(&collected.dataset, MIN_SUCCESS_EPISODES).unwrap();
    assert_eq!(d_succ.len(), recount);
    assert_eq!(summary.successful, recount);
    assert!(recount > 0 && recount < 500, "{recount} successes");

    let dcfg = DiffusionConfig {
        epochs: 60,
        ..DiffusionConfig::default()
    };
    let out = train_diffusion(&d_succ, &dcfg, 3).unwrap();
    let (first, last) = (out.loss_curve[0], *out.loss_curve.last().unwrap());
    assert!(last <= 0.5 * first, "loss {first} -> {last}");

    let policy = &out.policy;
    let mut env = Env::new(EnvId::ReachServe, EnvConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let toward = (0..100)
        .filter(|i| {
            let obs = env.reset(2_000_000 + i);
            let seq = sample_action_sequence(
                &policy.denoiser,
                &[obs.clone(), obs.clone()],
                &policy.schedule,
                Some(&policy.stats),
                &mut rng,
            )
            .unwrap();
            seq[0][0] * obs[0] + seq[0][1] * obs[1] > 0.0
        })
        .count();
    assert!(toward >= 80, "{toward}/100 first actions point at the mouth");
}

#[test]
fn controller_resamples_every_execution_horizon() {
    let policy = ScriptedPolicy {
        env_id: EnvId::ReachServe,
        controller: ScriptedController::default(),
    };
    let data = harvest(
        &policy,
        Env::new(EnvId::ReachServe, EnvConfig::default()),
        &HarvestConfig::episodes(3),
        0,
    )
    .unwrap()
    .dataset;
    for (exec, calls) in [(4, 50), (1, 200), (8, 25)] {
        let cfg = DiffusionConfig {
            epochs: 0,
            hidden: vec![8],
            steps: 5,
            exec_horizon: exec,
            ..DiffusionConfig::default()
        };
        let trained = train_diffusion(&data, &cfg, 0).unwrap();
        let mut ctrl = trained.policy.controller(1);
        let obs = data[0].steps[0].obs.clone();
        for _ in 0..200 {
            ctrl.act(&obs).unwrap();
        }
        assert_eq!(ctrl.sampler_calls(), calls, "exec horizon {exec}");
    }
}
