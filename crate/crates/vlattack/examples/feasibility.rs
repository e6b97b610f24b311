use std::time::Instant;
use vlattack::harness::*;
use vlattack::modelzoo::*;
use vlattack::bsa::AttackBudget;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let pre_n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let pre_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
    let ft_n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(800);
    let ft_epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(20);
    let eval_n: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(200);
    let sigma_s: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.95);
    let ft_lr: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let skip_eval: bool = args.get(8).map(|s| s == "skip").unwrap_or(false);
    let pre_lr: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let ft_bs: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(32);
    let model_seed: u64 = args.get(11).map(|s| s.parse().unwrap()).unwrap_or(13);
    let recipe_seed: u64 = args.get(12).map(|s| s.parse().unwrap()).unwrap_or(0);
    let freeze: bool = args.get(13).map(|s| s == "1").unwrap_or(false);

    let t0 = Instant::now();
    let corpus = synthesize_pretraining_corpus(pre_n, 7)?;
    let mut surrogate = build_pretrained(&ModelConfig::default(), model_seed)?;
    let log = surrogate.pretrain(&corpus, &TrainRecipe { epochs: pre_epochs, learning_rate: pre_lr, seed: recipe_seed, ..TrainRecipe::default() })?;
    if std::env::var("TRACE_LOSSES").is_ok() {
        let ls: Vec<String> = log.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
        println!("pretrain losses: {}", ls.join(" "));
    }
    println!("pretrain {pre_n}x{pre_epochs}: {:.1?}s losses {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(), log.epoch_losses[0], log.epoch_losses[log.epoch_losses.len()-1]);

    let t1 = Instant::now();
    let train = synthesize_dataset(TaskKind::Classification, ft_n, 42)?;
    let held = synthesize_dataset(TaskKind::Classification, eval_n, 4242)?;
    let victim = surrogate.fine_tune(&train, &TrainRecipe { epochs: ft_epochs, learning_rate: ft_lr, batch_size: ft_bs, seed: recipe_seed, freeze_image_tower: freeze, ..TrainRecipe::default() })?;
    let train_acc = victim.score_dataset(&train)?;
    let held_acc = victim.score_dataset(&held)?;
    let color_q: Vec<_> = held.samples.iter().filter(|s| matches!(s.target, TaskTarget::Class(c) if c < 8)).cloned().collect();
    let shape_q: Vec<_> = held.samples.iter().filter(|s| matches!(s.target, TaskTarget::Class(c) if c >= 8)).cloned().collect();
    let color_acc = victim.score_dataset(&TaskDataset { task: TaskKind::Classification, classes: held.classes.clone(), samples: color_q })?;
    let shape_acc = victim.score_dataset(&TaskDataset { task: TaskKind::Classification, classes: held.classes.clone(), samples: shape_q })?;
    println!("  color-question acc {color_acc:.3}  size-question acc {shape_acc:.3}");
    println!("fine-tune {ft_n}x{ft_epochs}: {:.1}s  train acc {:.3}  held acc {:.3}",
        t1.elapsed().as_secs_f64(), train_acc, held_acc);

    if skip_eval {
        return Ok(());
    }
    for mode in [EvalMode::RandomNoise, EvalMode::Bsa, EvalMode::BsaBa, EvalMode::BsaBaQ, EvalMode::Vlattack] {
        let t = Instant::now();
        let config = EvalConfig {
            mode,
            task: TaskKind::Classification,
            sample_count: eval_n,
            budget: AttackBudget { sigma_s, ..AttackBudget::default() },
            seed: 0,
        };
        let report = evaluate(&config, &surrogate, &victim, &held)?;
        println!("{:<12} asr {:>6.2}%  attempted {}  stages {:?}  mean_q {:.1}  cand {:.1}  {:.1}s",
            mode.name(), report.asr_percent, report.attempted,
            report.successes_by_stage, report.mean_queries,
            report.samples.iter().map(|o| o.trace.candidates.len()).sum::<usize>() as f64
                / report.samples.len().max(1) as f64,
            t.elapsed().as_secs_f64());
    }
    Ok(())
}
