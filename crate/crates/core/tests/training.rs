use uttrank::corpus::{QueryInstance, Utterance};
use uttrank::pipeline::{prepare_all, PipelineConfig};
use uttrank::synth::{generate, SynthConfig};
use uttrank::trainer::{train, train_baseline, train_ranker, Objective, OptimizerConfig, TrainConfig};

fn planted() -> Vec<QueryInstance> {
    generate(&SynthConfig { train: 40, validation: 0, test: 0, utterances: 30, ..Default::default() })
        .unwrap()
        .train
        .instances
}

#[test]
fn tenth_epoch_loss_is_below_first_for_every_objective() {
    let corpus = planted();
    let prepared = prepare_all(&corpus);
    let pipe = PipelineConfig { sample_size: 10, per_sample_top: 3, ..Default::default() };
    let ranker = train_ranker(&prepared, &TrainConfig::default(), &pipe).unwrap();
    for objective in [Objective::Pairwise, Objective::Listwise, Objective::Bce, Objective::Mse] {
        let cfg = TrainConfig { objective, epochs: 10, ..Default::default() };
        let out = train(&prepared, &cfg, &pipe, Some(&ranker.model)).unwrap();
        let first = out.history.first().unwrap().mean_loss;
        let last = out.history.last().unwrap().mean_loss;
        assert!(last < first, "{objective}: epoch 1 {first}, epoch 10 {last}");
    }
}

/// Eight utterances repeat the summary; the rest share no words with the
/// query or summary.
fn separable_instance(id: usize) -> QueryInstance {
    let meeting_id = format!("sep{id}");
    let utterances = (0..24)
        .map(|i| Utterance {
            meeting_id: meeting_id.clone(),
            index: i,
            speaker: "A".into(),
            text: if i % 3 == 0 {
                "budget remote battery design".into()
            } else {
                format!("lunch plans for friday number {i}")
            },
        })
        .collect();
    QueryInstance {
        instance_id: meeting_id.clone(),
        meeting_id,
        query: "budget remote battery design".into(),
        utterances,
        gold_summary: "budget remote battery design".into(),
        relevant_spans: None,
    }
}

#[test]
fn bce_on_separable_features_reaches_low_loss() {
    let corpus: Vec<QueryInstance> = (0..50).map(separable_instance).collect();
    let prepared = prepare_all(&corpus);
    let pipe = PipelineConfig { sample_size: 24, ..Default::default() };
    let cfg = TrainConfig { objective: Objective::Bce, learning_rate: 0.05, optimizer: OptimizerConfig::adam(), ..Default::default() };
    let out = train_baseline(&prepared, &cfg, &pipe).unwrap();
    assert_eq!(out.history.len(), 10);
    let last = out.history.last().unwrap().mean_loss;
    assert!(last < 0.1, "final BCE loss {last}");
}

#[test]
fn bce_span_labels_follow_annotations() {
    let mut corpus: Vec<QueryInstance> = (0..10).map(separable_instance).collect();
    for inst in &mut corpus {
        inst.relevant_spans = Some(vec![(0, 0), (3, 3), (6, 6), (9, 9), (12, 12), (15, 15), (18, 18), (21, 21)]);
    }
    let prepared = prepare_all(&corpus);
    let pipe = PipelineConfig { sample_size: 24, ..Default::default() };
    let base = TrainConfig { objective: Objective::Bce, epochs: 2, ..Default::default() };
    let from_spans = train_baseline(&prepared, &TrainConfig { locator_use_spans: true, ..base.clone() }, &pipe).unwrap();
    let from_rank = train_baseline(&prepared, &base, &pipe).unwrap();
    // The spans mark exactly the top-8 utterances, so both label sources agree.
    assert_eq!(from_spans.model.params(), from_rank.model.params());
}

#[test]
fn mse_with_equal_targets_is_non_increasing() {
    let corpus: Vec<QueryInstance> = (0..20)
        .map(|i| {
            let mut inst = separable_instance(i);
            for u in &mut inst.utterances {
                u.text = format!("{} x{}", inst.gold_summary, u.index % 2);
            }
            inst
        })
        .collect();
    let prepared = prepare_all(&corpus);
    let targets: Vec<f64> = prepared.iter().flat_map(|p| p.gold_relevance.iter().copied()).collect();
    let spread = targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - targets.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread < 1e-12, "targets should all be equal");
    let pipe = PipelineConfig { sample_size: 24, ..Default::default() };
    let cfg = TrainConfig { objective: Objective::Mse, learning_rate: 1e-3, epochs: 15, shuffle: false, ..Default::default() };
    let out = train_baseline(&prepared, &cfg, &pipe).unwrap();
    for w in out.history.windows(2) {
        assert!(w[1].mean_loss <= w[0].mean_loss, "{} -> {}", w[0].mean_loss, w[1].mean_loss);
    }
}

#[test]
fn checkpoints_reload_to_identical_scores() {
    let corpus = planted();
    let prepared = prepare_all(&corpus);
    let model = train_ranker(&prepared, &TrainConfig { epochs: 2, ..Default::default() }, &PipelineConfig::default())
        .unwrap()
        .model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    let back = uttrank::scorer::ScoringModel::load(&path).unwrap();
    for x in &prepared[0].features {
        assert_eq!(model.score(x).unwrap().to_bits(), back.score(x).unwrap().to_bits());
    }
}
