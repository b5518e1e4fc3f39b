use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spmem::eval::{
    bleu, distinct_n, export_memory_pca, generate, generations_tsv, parse_generations_tsv, pca_2d, pca_csv,
    DecodeConfig, Generation, MetricReport, PCA_HEADER,
};
use spmem::model::{ModelConfig, ModelKind, ModelParams};
use spmem::numerics::Tensor;
use spmem::text::{Language, EOS};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn model(kind: ModelKind, seed: u64) -> ModelParams {
    let config = ModelConfig {
        kind,
        emb_dim: 6,
        hidden_dim: 8,
        mem_slots: 8,
        mem_blocks: 2,
        vocab_sizes: [Some(15), Some(11)],
    };
    let mut p = ModelParams::new(config, seed).unwrap();
    for t in p.store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= 10.0);
    }
    p
}

#[test]
fn bleu_identity_and_zero_overlap() {
    let refs = vec![toks("a b c d"), toks("e f g h i")];
    assert_eq!(bleu(&refs, &refs, 4).unwrap(), vec![1.0; 4]);
    let hyps = vec![toks("x y z w"), toks("v u t s r")];
    assert_eq!(bleu(&hyps, &refs, 4).unwrap(), vec![0.0; 4]);
}

#[test]
fn bleu_brevity_penalty_by_hand() {
    // p1 = p2 = 1, BP = exp(1 - 3/2)
    let b = bleu(&[toks("the cat")], &[toks("the cat sat")], 2).unwrap();
    assert!((b[0] - (-0.5f64).exp()).abs() < 1e-12);
    assert!((b[1] - 0.6065).abs() < 1e-4);
}

#[test]
fn bleu_smoothing_by_hand() {
    // hyp "a b c", ref "a c b": p1 = 3/3, p2 = 0/2 -> 1/3, BP = 1
    let b = bleu(&[toks("a b c")], &[toks("a c b")], 2).unwrap();
    assert!((b[1] - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
}

#[test]
fn distinct_examples() {
    assert_eq!(distinct_n(&[toks("a b a")], 1).unwrap(), 2.0 / 3.0);
    assert_eq!(distinct_n(&[toks("a b c"), toks("d e")], 1).unwrap(), 1.0);
    assert_eq!(distinct_n(&[toks("a a a")], 2).unwrap(), 0.5);
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    prop::collection::vec(
        (prop::collection::vec(0u8..6, 1..7), prop::collection::vec(0u8..6, 1..7)),
        1..8,
    )
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant(pairs in corpus(), rot in 0usize..8) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let mut rotated = pairs.clone();
        rotated.rotate_left(k);
        let (h2, r2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
        let a = bleu(&h, &r, 4).unwrap();
        let b = bleu(&h2, &r2, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(x));
        }
        let d1 = distinct_n(&h, 1).unwrap();
        prop_assert!((d1 - distinct_n(&h2, 1).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn bleu_does_not_grow_when_overlap_is_removed(pairs in corpus(), which in 0usize..8) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let i = which % h.len();
        let mut h2 = h.clone();
        // 100+ never occurs in a reference
        h2[i] = h2[i].iter().enumerate().map(|(j, &t)| if r[i].contains(&t) { 100 + j as u8 } else { t }).collect();
        let before = bleu(&h, &r, 4).unwrap();
        let after = bleu(&h2, &r, 4).unwrap();
        for (x, y) in after.iter().zip(&before) {
            prop_assert!(*x <= y + 1e-12);
        }
    }
}

#[test]
fn generation_respects_max_len_and_eos() {
    let p = model(ModelKind::SpImpMem, 3);
    for max_len in [1, 3, 7] {
        for q in [vec![4usize, 5, 6], vec![9, 9], vec![12]] {
            let out = generate(&p, Language::L1, &q, &DecodeConfig::greedy(max_len)).unwrap();
            assert!(out.len() <= max_len);
            assert!(!out.contains(&EOS));
            let beam = generate(&p, Language::L1, &q, &DecodeConfig::beam(3, max_len)).unwrap();
            assert!(beam.len() <= max_len && !beam.contains(&EOS));
        }
    }
}

#[test]
fn beam_width_one_is_greedy() {
    for (kind, seed) in [(ModelKind::Seq2Seq, 1), (ModelKind::SpImpMem, 2), (ModelKind::Mem, 3)] {
        let p = model(kind, seed);
        for lang in [Language::L1, Language::L2] {
            for q in [vec![4usize, 5, 6, 7], vec![8, 4], vec![10]] {
                let g = generate(&p, lang, &q, &DecodeConfig::greedy(12)).unwrap();
                let b = generate(&p, lang, &q, &DecodeConfig::beam(1, 12)).unwrap();
                assert_eq!(g, b);
            }
        }
    }
}

#[test]
fn generation_is_deterministic_and_rejects_empty_queries() {
    let p = model(ModelKind::ImpMem, 4);
    let cfg = DecodeConfig::beam(4, 10);
    assert_eq!(
        generate(&p, Language::L2, &[4, 5], &cfg).unwrap(),
        generate(&p, Language::L2, &[4, 5], &cfg).unwrap()
    );
    assert!(generate(&p, Language::L2, &[], &cfg).is_err());
}

#[test]
fn generations_tsv_roundtrip_and_report_recomputation() {
    let gens = vec![
        Generation {
            query: "a b".into(),
            hypothesis: "b a".into(),
            reference: "b a EVEN".into(),
        },
        Generation {
            query: "c".into(),
            hypothesis: "".into(),
            reference: "c ODD".into(),
        },
    ];
    let text = generations_tsv(&gens);
    let back = parse_generations_tsv(&text, Path::new("gens.tsv")).unwrap();
    assert_eq!(back, gens);
    assert!(parse_generations_tsv("only\ttwo\n", Path::new("bad.tsv")).is_err());

    let report = MetricReport::from_generations(back, Default::default()).unwrap();
    let hyps: Vec<_> = gens.iter().map(|g| toks(&g.hypothesis)).collect();
    let refs: Vec<_> = gens.iter().map(|g| toks(&g.reference)).collect();
    let b = bleu(&hyps, &refs, 4).unwrap();
    assert_eq!([report.bleu_1, report.bleu_2, report.bleu_3, report.bleu_4], [b[0], b[1], b[2], b[3]]);
    assert_eq!(report.distinct_1, distinct_n(&hyps, 1).unwrap());
    assert!(report.scores().iter().all(|s| (0.0..=1.0).contains(s)));
    let json: MetricReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json, report);
}

#[test]
fn pca_axis_aligned_and_ordering() {
    let x = Tensor::from_rows(&[vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 0.5], vec![0.0, -0.5]]).unwrap();
    let p = pca_2d(&x).unwrap();
    for i in 0..4 {
        assert_eq!(p.coords[i][0].abs(), x.at(i, 0).abs());
        assert_eq!(p.coords[i][1].abs(), x.at(i, 1).abs());
    }
    assert!(p.explained_variance_ratio[0] >= p.explained_variance_ratio[1]);
    assert!((p.explained_variance_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn pca_shift_invariant_up_to_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::uniform(&[12, 5], 1.0, &mut rng);
    let shift = [3.0, -1.0, 0.5, 7.0, 2.0];
    let y = Tensor::from_rows(
        &(0..12)
            .map(|i| x.row(i).iter().zip(&shift).map(|(a, s)| a + s).collect())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let (a, b) = (pca_2d(&x).unwrap(), pca_2d(&y).unwrap());
    for k in 0..2 {
        let same = (0..12).map(|i| (a.coords[i][k] - b.coords[i][k]).abs()).fold(0.0, f64::max);
        let flip = (0..12).map(|i| (a.coords[i][k] + b.coords[i][k]).abs()).fold(0.0, f64::max);
        assert!(same.min(flip) < 1e-8);
    }
}

#[test]
fn pca_needs_two_slots() {
    assert!(pca_2d(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).is_err());
}

#[test]
fn memory_pca_export() {
    let p = model(ModelKind::SpImpMem, 6);
    for (name, bank) in p.banks() {
        let proj = export_memory_pca(&p.store, bank, 1).unwrap();
        assert_eq!(proj.coords.len(), bank.slots_per_block, "{name}");
        let csv = pca_csv(&proj);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(PCA_HEADER));
        assert_eq!(lines.count(), bank.slots_per_block);
        assert!(csv.lines().nth(1).unwrap().ends_with(",1"));
    }
    let bank = p.bank("shared").unwrap();
    assert!(export_memory_pca(&p.store, bank, 2).is_err());
}
