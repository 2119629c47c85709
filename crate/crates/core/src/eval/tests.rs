use super::*;
use proptest::prelude::*;
use std::time::Duration;

fn toks(s: &str) -> Vec<&str> {
    whitespace_tokens(s)
}

fn rec(id: &str, direction: Direction, prediction: &str, reference: &str) -> PairRecord {
    PairRecord { id: id.into(), direction, prediction: prediction.into(), reference: reference.into() }
}

#[test]
fn delta_len_examples() {
    assert_eq!(delta_len("CCO", "CCO", LenUnit::Chars), 0);
    assert_eq!(delta_len("CC", "CCO", LenUnit::Chars), -1);
    assert_eq!(delta_len("a b", "a b c d", LenUnit::Tokens), -2);
    assert_eq!(delta_len("", "CCO", LenUnit::Chars), -3);
}

#[test]
fn chrf_examples() {
    assert_eq!(chrf("CCCO", "CCCO").unwrap(), 1.0);
    let expect = (2.0 / 3.0 + 0.5 + 0.0) / 3.0;
    assert!((chrf("CCO", "CCN").unwrap() - expect).abs() < 1e-12);
    assert!((chrf("CCO", "CCN").unwrap() - 0.3889).abs() < 1e-4);
    assert_eq!(chrf("abc", "xyz").unwrap(), 0.0);
    assert_eq!(chrf("", "CCO").unwrap(), 0.0);
    assert!(matches!(chrf("CCO", ""), Err(EvalError::Contract(_))));
    // A two-character reference averages over orders 1 and 2 only.
    assert_eq!(chrf("CO", "CO").unwrap(), 1.0);
    // Prediction too short for bigrams scores 0 at that order.
    assert!((chrf("C", "CO").unwrap() - (2.0 / 3.0) / 2.0).abs() < 1e-12);
}

#[test]
fn levenshtein_examples() {
    assert_eq!(levenshtein("CCO", "CCO"), 0);
    assert_eq!(levenshtein("", "CCO"), 3);
    assert_eq!(levenshtein("kitten", "sitting"), 3);
    assert_eq!(levenshtein("flaw", "lawn"), 2);
}

#[test]
fn bleu_examples() {
    assert_eq!(bleu(&toks("a b c d"), &toks("a b c d"), 2).unwrap(), 1.0);
    assert!((bleu(&toks("a b c d"), &toks("a b x d"), 2).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(bleu(&toks("a b"), &toks("c d"), 4).unwrap(), 0.0);
    assert_eq!(bleu(&[], &toks("c d"), 2).unwrap(), 0.0);
    let bp = bleu(&toks("a b"), &toks("a b c d"), 2).unwrap();
    assert!((bp - (-1.0f64).exp()).abs() < 1e-12);
    assert!(bleu(&toks("a"), &toks("a"), 0).is_err());
    assert!(bleu(&toks("a"), &toks("a"), 5).is_err());
    assert_eq!(bleu(&toks("a"), &toks("a"), 4).unwrap(), 1.0);
}

#[test]
fn rouge_examples() {
    for v in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
        assert_eq!(rouge(&toks("a b c"), &toks("a b c"), v), 1.0);
        assert_eq!(rouge(&[], &toks("a b c"), v), 0.0);
        assert_eq!(rouge(&toks("x"), &toks("x"), v), 1.0);
    }
    assert!((rouge(&toks("a c"), &toks("a b c"), RougeVariant::RL) - 0.8).abs() < 1e-12);
    assert_eq!(rouge(&toks("x"), &toks("a b"), RougeVariant::R2), 0.0);
    assert_eq!(rouge(&toks("y"), &toks("x"), RougeVariant::R2), 0.0);
}

#[test]
fn mol_win_examples() {
    assert!(mol_win_parts(0.35, 2, true));
    assert!(!mol_win_parts(0.29, 0, true));
    assert!(!mol_win_parts(0.3, 0, true));
    assert!(!mol_win_parts(0.9, 5, true));
    assert!(!mol_win_parts(0.9, -5, true));
    assert!(mol_win_parts(0.9, -4, true));
    assert!(!mol_win_parts(0.9, 0, false));

    assert!(mol_win(&rec("a", Direction::Lang2Mol, "CCCO", "CCCO")).unwrap());
    let unparseable = rec("b", Direction::Lang2Mol, "CC(CO", "CC(C)O");
    assert!(chrf(&unparseable.prediction, &unparseable.reference).unwrap() > 0.3);
    assert!(!mol_win(&unparseable).unwrap());
    assert!(!mol_win(&rec("c", Direction::Lang2Mol, "", "CCO")).unwrap());
    assert!(matches!(mol_win(&rec("d", Direction::Mol2Lang, "x", "y")), Err(EvalError::Contract(_))));
}

#[test]
fn lang_win_examples() {
    assert!(lang_win(&NliVerdict { p_entail: 0.7, p_neutral: 0.2, p_contradict: 0.1 }));
    assert!(!lang_win(&NliVerdict { p_entail: 0.3, p_neutral: 0.4, p_contradict: 0.3 }));
    let third = 1.0 / 3.0;
    assert!(!lang_win(&NliVerdict { p_entail: third, p_neutral: third, p_contradict: third }));
    assert!(!lang_win(&NliVerdict { p_entail: 0.45, p_neutral: 0.1, p_contradict: 0.45 }));
}

#[test]
fn verdict_validation() {
    assert!(NliVerdict::new(0.5, 0.25, 0.25).is_ok());
    assert!(NliVerdict::new(0.5, 0.5, 0.5).is_err());
    assert!(NliVerdict::new(1.2, -0.1, -0.1).is_err());
    assert!(NliVerdict::new(f64::NAN, 0.5, 0.5).is_err());
}

#[test]
fn lexical_baseline_contract() {
    let same = LexicalBaseline::verdict("a chain of 3 carbons", "a chain of 3 carbons");
    assert!(same.p_entail >= same.p_neutral && same.p_entail >= same.p_contradict);
    let disjoint = LexicalBaseline::verdict("a chain of 3 carbons", "blue sky");
    assert!(!lang_win(&disjoint));
    assert!(disjoint.p_contradict > disjoint.p_entail);
    let empty = LexicalBaseline::verdict("a chain", "");
    assert!(!lang_win(&empty));
    for v in [same, disjoint, empty] {
        assert!((v.p_entail + v.p_neutral + v.p_contradict - 1.0).abs() < 1e-12);
    }
}

fn sed_stub(reply: &str) -> ProcessScorer {
    let script = format!("s/^{{\"id\":\\(\"[^\"]*\"\\).*$/{{\"id\":\\1,{reply}}}/");
    ProcessScorer::new("sed", vec![script])
}

fn requests(n: usize) -> Vec<NliRequest> {
    (0..n)
        .map(|i| NliRequest { id: format!("r{i}"), premise: "a chain".into(), hypothesis: format!("guess {i}") })
        .collect()
}

#[test]
fn process_scorer_round_trip() {
    let mut s = sed_stub("\"entail\":0.6,\"neutral\":0.3,\"contradict\":0.1");
    let out = s.score_batch(&requests(5)).unwrap();
    assert_eq!(out.len(), 5);
    for v in out {
        assert_eq!(v, Some(NliVerdict { p_entail: 0.6, p_neutral: 0.3, p_contradict: 0.1 }));
    }
}

#[test]
fn process_scorer_matches_out_of_order_responses() {
    // tac reverses the request lines; answers come back last to first.
    let script = "tac | sed 's/^{\"id\":\\(\"[^\"]*\"\\).*$/{\"id\":\\1,\"entail\":0.2,\"neutral\":0.2,\"contradict\":0.6}/'";
    let mut s = ProcessScorer::new("sh", vec!["-c".into(), script.into()]);
    let out = s.score_batch(&requests(4)).unwrap();
    assert!(out.iter().all(|v| v.is_some_and(|v| v.p_contradict == 0.6)));
}

#[test]
fn process_scorer_failures() {
    let mut bad = sed_stub("\"entail\":0.6,\"neutral\":0.6,\"contradict\":0.1");
    assert_eq!(bad.score_batch(&requests(2)).unwrap(), vec![None, None]);

    let mut missing = ProcessScorer::new("/nonexistent/scorer", vec![]);
    assert!(matches!(missing.score_batch(&requests(1)), Err(EvalError::Scorer(_))));

    let mut silent = ProcessScorer::new("sleep", vec!["5".into()]);
    silent.timeout = Duration::from_millis(200);
    assert!(matches!(silent.score_batch(&requests(1)), Err(EvalError::Scorer(_))));

    assert!(ProcessScorer::from_command_line("  ").is_err());
    assert_eq!(ProcessScorer::from_command_line("python3 nli.py --x").unwrap().args, vec!["nli.py", "--x"]);
}

#[test]
fn evaluate_without_scorer_leaves_nli_null() {
    let recs = vec![rec("1", Direction::Mol2Lang, "a chain", "a chain"), rec("2", Direction::Mol2Lang, "x", "a b")];
    let out = evaluate(&recs, None, 8).unwrap();
    assert!(out.iter().all(|r| r.nli.is_none() && !r.win));
    let report = aggregate_report(&out).unwrap();
    assert_eq!(report.nli_excluded, 2);
    assert_eq!(report.metrics["nli_entail"].count, 0);
    assert_eq!(report.metrics["nli_entail"].mean, None);

    let mut baseline = LexicalBaseline;
    let out = evaluate(&recs, Some(&mut baseline), 1).unwrap();
    assert!(out[0].win && out[0].nli.is_some());
    assert!(!out[1].win);
    assert_eq!(aggregate_report(&out).unwrap().nli_excluded, 0);
}

#[test]
fn scored_fields_follow_direction() {
    let l = score_pair(&rec("1", Direction::Lang2Mol, "CCO", "CCO")).unwrap();
    assert!(l.valid == Some(true) && l.morgan_tanimoto == Some(1.0) && l.win);
    assert!(l.bleu2.is_none() && l.rouge_l.is_none() && l.nli.is_none());
    let m = score_pair(&rec("2", Direction::Mol2Lang, "a b c", "a b c d")).unwrap();
    assert_eq!(m.delta_len, -1);
    assert!(m.valid.is_none() && m.morgan_tanimoto.is_none());
    assert!(m.bleu2.is_some() && m.bleu4.is_some() && m.rouge1.is_some() && m.rouge2.is_some() && m.rouge_l.is_some());
    assert!(score_pair(&rec("3", Direction::Lang2Mol, "CCO", "")).is_err());
    let bad = score_pair(&rec("4", Direction::Lang2Mol, "C(", "CCO")).unwrap();
    assert_eq!(bad.valid, Some(false));
    assert_eq!(bad.morgan_tanimoto, Some(0.0));
}

fn metric(direction: Direction, delta: i64, chrf: f64, lev: usize, valid: bool, tan: f64, win: bool) -> PairMetricRecord {
    PairMetricRecord {
        id: format!("{delta}-{lev}"),
        direction,
        delta_len: delta,
        chrf,
        levenshtein: lev,
        bleu2: None,
        bleu4: None,
        rouge1: None,
        rouge2: None,
        rouge_l: None,
        valid: Some(valid),
        morgan_tanimoto: Some(tan),
        nli: None,
        win,
    }
}

#[test]
fn aggregate_examples() {
    let one = metric(Direction::Lang2Mol, 3, 0.4, 2, true, 0.7, true);
    let r = aggregate_report(std::slice::from_ref(&one)).unwrap();
    assert_eq!(r.count, 1);
    assert_eq!(r.win_rate, 1.0);
    assert_eq!(r.metrics["delta_len"].mean, Some(3.0));
    assert_eq!(r.metrics["chrf"].mean, Some(0.4));
    assert_eq!(r.metrics["morgan_tanimoto"].median, Some(0.7));

    let fixture = vec![
        metric(Direction::Lang2Mol, -2, 0.5, 2, true, 0.5, true),
        metric(Direction::Lang2Mol, 0, 1.0, 0, true, 1.0, true),
        metric(Direction::Lang2Mol, 1, 0.25, 1, false, 0.0, false),
        metric(Direction::Lang2Mol, 5, 0.75, 5, true, 0.25, false),
    ];
    let r = aggregate_report(&fixture).unwrap();
    assert_eq!(r.count, 4);
    assert_eq!(r.wins, 2);
    assert_eq!(r.win_rate, 0.5);
    assert_eq!(r.metrics["delta_len"].mean, Some(1.0));
    assert_eq!(r.metrics["delta_len"].median, Some(0.5));
    assert_eq!(r.metrics["chrf"].mean, Some(0.625));
    assert_eq!(r.metrics["chrf"].median, Some(0.625));
    assert_eq!(r.metrics["levenshtein"].mean, Some(2.0));
    assert_eq!(r.metrics["levenshtein"].median, Some(1.5));
    assert_eq!(r.metrics["valid"].mean, Some(0.75));
    assert_eq!(r.metrics["morgan_tanimoto"].mean, Some(0.4375));
    assert_eq!(r.nli_excluded, 0);

    let mixed = vec![one.clone(), metric(Direction::Mol2Lang, 0, 0.1, 0, true, 0.0, false)];
    assert!(matches!(aggregate_report(&mixed), Err(EvalError::Contract(_))));
    assert!(aggregate_report(&[]).is_err());
}

#[test]
fn histogram_layout() {
    let recs: Vec<PairMetricRecord> = [-60, -50, 0, 49, 50, 51]
        .iter()
        .map(|&d| metric(Direction::Lang2Mol, d, 1.0, 60, true, 1.0, true))
        .collect();
    let r = aggregate_report(&recs).unwrap();
    let h = &r.metrics["delta_len"].histogram;
    assert_eq!(h.counts.len(), 100);
    assert_eq!((h.underflow, h.overflow), (1, 1));
    assert_eq!(h.counts[0], 1);
    assert_eq!(h.counts[50], 1);
    assert_eq!(h.counts[99], 2);
    assert_eq!(h.total(), 6);
    assert_eq!(h.to_csv().lines().count(), 1 + 100 + 2);

    let c = &r.metrics["chrf"].histogram;
    assert_eq!(c.counts.len(), 20);
    assert_eq!(c.counts[19], 6);
    assert_eq!(c.to_csv().lines().count(), 1 + 20 + 2);
    assert_eq!(r.metrics["levenshtein"].histogram.overflow, 6);
}

#[test]
fn records_round_trip_as_json() {
    let mut m = score_pair(&rec("x", Direction::Mol2Lang, "a b", "a b c")).unwrap();
    attach_nli(&mut m, NliVerdict { p_entail: 0.5, p_neutral: 0.25, p_contradict: 0.25 });
    let json = serde_json::to_string(&m).unwrap();
    assert!(json.contains("\"rougeL\""));
    assert_eq!(serde_json::from_str::<PairMetricRecord>(&json).unwrap(), m);
    let report = aggregate_report(&[m]).unwrap();
    let back: MetricReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(back, report);
}

fn text() -> impl Strategy<Value = String> {
    "[abcCO() =]{0,20}"
}

proptest! {
    #[test]
    fn identical_inputs_score_one(s in "[a-z]{1,6}( [a-z]{1,6}){0,6}") {
        prop_assert_eq!(chrf(&s, &s).unwrap(), 1.0);
        let t = toks(&s);
        prop_assert_eq!(bleu(&t, &t, 2).unwrap(), 1.0);
        prop_assert_eq!(bleu(&t, &t, 4).unwrap(), 1.0);
        for v in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
            prop_assert_eq!(rouge(&t, &t, v), 1.0);
        }
    }

    #[test]
    fn disjoint_alphabets_score_zero(a in "[a-m]{1,6}( [a-m]{1,6}){0,5}", b in "[n-z]{1,6}( [n-z]{1,6}){0,5}") {
        // Spaces are characters too, so compare the letters only.
        prop_assert_eq!(chrf(&a.replace(' ', ""), &b.replace(' ', "")).unwrap(), 0.0);
        let (ta, tb) = (toks(&a), toks(&b));
        prop_assert_eq!(bleu(&ta, &tb, 2).unwrap(), 0.0);
        for v in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
            prop_assert_eq!(rouge(&ta, &tb, v), 0.0);
        }
    }

    #[test]
    fn levenshtein_is_a_metric(a in "[abc]{0,12}", b in "[abc]{0,12}", c in "[abc]{0,12}") {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert_eq!(levenshtein(&a, &a), 0);
    }

    #[test]
    fn mol_win_is_monotone(c in 0.0f64..1.0, dc in 0.0f64..0.5, d in -8i64..8, valid: bool) {
        if mol_win_parts(c, d, valid) {
            prop_assert!(mol_win_parts((c + dc).min(1.0), d, valid));
            let closer = d - d.signum();
            prop_assert!(mol_win_parts(c, closer, valid));
        }
    }

    #[test]
    fn metrics_are_total(pred in text(), reference in "[abcCO() =]{1,20}") {
        for direction in Direction::ALL {
            let m = score_pair(&rec("p", direction, &pred, &reference)).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.chrf));
            for v in [m.bleu2, m.bleu4, m.rouge1, m.rouge2, m.rouge_l].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn win_rate_is_mean_of_indicator(wins in prop::collection::vec(any::<bool>(), 1..60)) {
        let recs: Vec<PairMetricRecord> = wins
            .iter()
            .map(|&w| metric(Direction::Lang2Mol, 0, 0.5, 0, true, 0.5, w))
            .collect();
        let r = aggregate_report(&recs).unwrap();
        let mean = wins.iter().map(|&w| f64::from(u8::from(w))).sum::<f64>() / wins.len() as f64;
        prop_assert_eq!(r.win_rate, mean);
        prop_assert_eq!(r.count, wins.len());
    }
}
