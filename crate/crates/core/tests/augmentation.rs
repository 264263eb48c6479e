//! Prompt counts of single-template and augmented datasets.

use ctalab::augment::{build_dataset, DatasetBuildConfig};
use ctalab::experiment::{training_dataset, vocabulary_texts, Arm, ExperimentConfig};
use ctalab::model::Tokenizer;
use ctalab::sampling::stratified_select;
use ctalab::synthgen::{generate_corpus, GeneratorSpec};
use ctalab::table::{Column, ColumnSource, LabelSpace, LabeledColumn};
use ctalab::trainer::TrainMode;

fn corpus_columns(n: usize) -> (Vec<LabeledColumn>, LabelSpace) {
    let labels = ["Alpha", "Beta", "Gamma"];
    let cols = (0..n)
        .map(|i| LabeledColumn {
            column: Column::new(
                vec![format!("x{i}"), format!("longer value {i}"), "z".into()],
                ColumnSource::new(format!("t{i}"), 0),
            ),
            label: labels[i % 3].to_string(),
        })
        .collect();
    (cols, LabelSpace::new(labels).unwrap())
}

#[test]
fn thirds_match_full_single_template() {
    for n in [3usize, 9, 600] {
        let (train, space) = corpus_columns(n);
        let single = build_dataset(&train, &space, &DatasetBuildConfig::new(&["p3"], 1), None).unwrap();
        let third = stratified_select(&train, 1.0 / 3.0, 1).unwrap();
        assert_eq!(third.len(), n / 3);
        let augmented = build_dataset(&third, &space, &DatasetBuildConfig::new(&["p1", "p2", "p3"], 1), None).unwrap();
        assert_eq!(augmented.len(), single.len(), "N = {n}");
        assert_eq!(single.len(), n);
    }
}

#[test]
fn experiment_arms_use_equal_prompt_counts() {
    // 72 columns per label gives 50 training columns per label, 600 in all
    let corpus = generate_corpus(&GeneratorSpec::standard(72, 3)).unwrap();
    assert_eq!(corpus.train.len(), 600);
    let cfg = ExperimentConfig::default();
    let tok = Tokenizer::build(&vocabulary_texts(corpus.label_space.labels())).unwrap();
    let arm = |fraction, templates: &[&str]| Arm {
        fraction,
        templates: templates.iter().map(|s| s.to_string()).collect(),
        mode: TrainMode::Lora,
    };
    let (_, single) = training_dataset(&corpus, &arm(1.0, &["p3"]), &cfg, &tok, 42).unwrap();
    let (cols, aug) = training_dataset(&corpus, &arm(1.0 / 3.0, &["p1", "p2", "p3"]), &cfg, &tok, 42).unwrap();
    assert_eq!(cols.len(), 200);
    assert_eq!(single.len(), 600);
    assert_eq!(aug.len(), 600);
    for inst in single.iter().chain(&aug) {
        assert!(tok.encode(&inst.input_text).len() <= cfg.prompt_budget());
    }
}
