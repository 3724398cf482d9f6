use madi_core::assembly::{checkpoint, prepare_all, train, AblationTag, EvalSet, Madi, ModelConfig, TrainConfig};
use madi_core::datagen::{generate_dataset, read_dataset, write_dataset, GenRanges, QaConfig, TaskKind};
use madi_core::ddi::DdiConfig;
use madi_core::encoders::TextVocab;
use madi_core::evalmetrics::run_eval;

fn small() -> ModelConfig {
    ModelConfig {
        dim: 16,
        pn: 16,
        pv: 16,
        ddi: DdiConfig { d: 8, k: 4, levels: 2, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn generate_train_save_load_evaluate() {
    let tasks = [TaskKind::TrendClass, TaskKind::PeriodValue, TaskKind::NoiseClass];
    let ranges = GenRanges { length: (128, 256), ..Default::default() };
    let samples = generate_dataset(12, 4, &tasks, &ranges, &QaConfig::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&samples, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!((a.task, &a.question, &a.answer), (b.task, &b.question, &b.answer));
        assert_eq!(a.series.len(), b.series.len());
    }

    let cfg = small();
    let vocab = TextVocab::standard();
    let prepared = prepare_all(&back, &vocab, &cfg).unwrap();
    let mut model = Madi::new(cfg, vocab, 9).unwrap();
    let tc = TrainConfig { steps: 4, batch: 3, eval_interval: 2, eval_samples: 4, max_answer: 4, ..Default::default() };
    let set = EvalSet { samples: &back, prepared: &prepared };
    let out = train(&mut model, AblationTag::Full, &tc, &prepared, Some(set), &mut |_| {}).unwrap();
    assert_eq!(out.log.len(), 4);
    assert_eq!(out.log.iter().filter(|r| r.eval_acc.is_some()).count(), 2);
    assert!(out.best.is_some());
    assert!(model.codebooks.initialized);

    let ck = dir.path().join("m.ckpt");
    checkpoint::save(&model, &ck).unwrap();
    let loaded = checkpoint::load(&ck).unwrap();
    for tag in [AblationTag::Full, AblationTag::NoCth, AblationTag::NoNum] {
        let (a, ans_a) = run_eval(&model, &back, &prepared, tag, 4).unwrap();
        let (b, ans_b) = run_eval(&loaded, &back, &prepared, tag, 4).unwrap();
        assert_eq!(ans_a, ans_b);
        assert_eq!(a, b);
        assert_eq!(a.tasks.len(), 3);
    }
}

#[test]
fn corrupt_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"not\": \"a sample\"}\n").unwrap();
    let err = read_dataset(&path).unwrap_err();
    assert!(err.is_user_error());
    assert!(err.to_string().contains("line 1"));

    let ck = dir.path().join("bad.ckpt");
    std::fs::write(&ck, b"MADICKPT garbage").unwrap();
    assert!(checkpoint::load(&ck).unwrap_err().is_user_error());
    assert!(checkpoint::load(&dir.path().join("none.ckpt")).unwrap_err().is_user_error());
}
