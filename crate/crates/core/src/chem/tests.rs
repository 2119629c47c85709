use super::*;
use proptest::prelude::*;

fn kinds(s: &str) -> Vec<TokenKind> {
    tokenize_smiles(s).unwrap().into_iter().map(|t| t.kind).collect()
}

#[test]
fn tokenize_examples() {
    let toks = tokenize_smiles("CCO").unwrap();
    assert_eq!(toks.len(), 3);
    assert!(toks.iter().all(|t| matches!(t.kind, TokenKind::Atom(_))));

    let rings: Vec<u32> = kinds("C%12CC%12")
        .into_iter()
        .filter_map(|k| if let TokenKind::RingClosure(d) = k { Some(d) } else { None })
        .collect();
    assert_eq!(rings, vec![12, 12]);

    assert_eq!(tokenize_smiles("CQ"), Err(ChemError::Tokenize { offset: 1, ch: Some('Q') }));
}

#[test]
fn tokenize_two_letter_and_brackets() {
    let k = kinds("ClCBr");
    let elems: Vec<&str> = k
        .iter()
        .map(|t| match t {
            TokenKind::Atom(a) => a.element.as_str(),
            _ => "",
        })
        .collect();
    assert_eq!(elems, ["Cl", "C", "Br"]);

    match &kinds("[13CH3-]")[0] {
        TokenKind::BracketAtom(a) => {
            assert_eq!(a, &AtomSpec { element: "C".into(), aromatic: false, charge: -1, hydrogens: Some(3), isotope: Some(13) })
        }
        other => panic!("{other:?}"),
    }
    match &kinds("[nH]")[0] {
        TokenKind::BracketAtom(a) => assert!(a.aromatic && a.element == "N" && a.hydrogens == Some(1)),
        other => panic!("{other:?}"),
    }
    match &kinds("[Fe++]")[0] {
        TokenKind::BracketAtom(a) => assert_eq!(a.charge, 2),
        other => panic!("{other:?}"),
    }
    match &kinds("[C@@H]")[0] {
        TokenKind::BracketAtom(a) => assert_eq!(a.hydrogens, Some(1)),
        other => panic!("{other:?}"),
    }
    assert_eq!(kinds("C/C=C\\C")[1], TokenKind::Bond(BondSymbol::Single));
    assert!(matches!(tokenize_smiles("[Xx]"), Err(ChemError::Tokenize { offset: 1, .. })));
    assert!(matches!(tokenize_smiles("[CH4"), Err(ChemError::Tokenize { offset: 0, .. })));
    assert!(matches!(tokenize_smiles("C%1"), Err(ChemError::Tokenize { offset: 1, .. })));
    assert!(matches!(tokenize_smiles("C%05C"), Err(ChemError::Tokenize { offset: 1, .. })));
    assert!(matches!(tokenize_smiles("C0"), Err(ChemError::Tokenize { offset: 1, .. })));
    assert!(matches!(tokenize_smiles("CC O"), Err(ChemError::Tokenize { offset: 2, ch: Some(' ') })));
}

#[test]
fn parse_examples() {
    let g = parse_smiles("CCO").unwrap();
    assert_eq!(g.atoms.len(), 3);
    assert_eq!(g.bonds.len(), 2);
    assert!(g.bonds.iter().all(|b| b.order == BondOrder::Single));

    // Cyclopropane: 0-1, 1-2 along the chain, 2-0 through ring 1.
    let g = parse_smiles("C1CC1").unwrap();
    assert_eq!(g.atoms.len(), 3);
    let mut pairs: Vec<(usize, usize)> = g.bonds.iter().map(|b| (b.a.min(b.b), b.a.max(b.b))).collect();
    pairs.sort();
    assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);

    assert_eq!(parse_smiles("C1CC"), Err(ChemError::UnclosedRing { digit: 1 }));
}

#[test]
fn parse_branches_and_bonds() {
    let g = parse_smiles("CC(=O)O").unwrap();
    assert_eq!(g.atoms.len(), 4);
    assert!(g.bonds.contains(&Bond { a: 1, b: 2, order: BondOrder::Double }));
    assert!(g.bonds.contains(&Bond { a: 1, b: 3, order: BondOrder::Single }));

    let g = parse_smiles("c1ccccc1").unwrap();
    assert_eq!(g.bonds.len(), 6);
    assert!(g.bonds.iter().all(|b| b.order == BondOrder::Aromatic));
    assert!((0..6).all(|i| g.hydrogens(i) == 1));

    let g = parse_smiles("CC.O.[Na+]").unwrap();
    assert_eq!(g.fragments, 3);
    assert_eq!(g.bonds.len(), 1);

    let g = parse_smiles("C=1CCC1").unwrap();
    assert!(g.bonds.contains(&Bond { a: 0, b: 3, order: BondOrder::Double }));
}

#[test]
fn parse_errors_are_distinct() {
    assert_eq!(parse_smiles(""), Err(ChemError::Empty));
    assert_eq!(parse_smiles("C(C"), Err(ChemError::UnclosedBranch { offset: 1 }));
    assert_eq!(parse_smiles("CC)C"), Err(ChemError::UnopenedBranch { offset: 2 }));
    assert_eq!(parse_smiles("C()C"), Err(ChemError::EmptyBranch { offset: 1 }));
    assert_eq!(parse_smiles("C((C))"), Err(ChemError::BranchWithoutAtom { offset: 1 }));
    assert_eq!(parse_smiles("C(1CC1)"), Err(ChemError::BranchWithoutAtom { offset: 1 }));
    assert!(parse_smiles("C(=O)(C)O").is_ok());
    assert_eq!(parse_smiles("=CC"), Err(ChemError::MissingAtom { offset: 0 }));
    assert_eq!(parse_smiles("CC="), Err(ChemError::MissingAtom { offset: 2 }));
    assert_eq!(parse_smiles("C=.C"), Err(ChemError::MissingAtom { offset: 1 }));
    assert_eq!(parse_smiles("(C)C"), Err(ChemError::MissingAtom { offset: 0 }));
    assert_eq!(parse_smiles("C."), Err(ChemError::MissingAtom { offset: 1 }));
    assert_eq!(parse_smiles("1CC"), Err(ChemError::MissingAtom { offset: 0 }));
    assert_eq!(parse_smiles("C=1CC#1"), Err(ChemError::ConflictingRingBond { digit: 1 }));
    assert_eq!(parse_smiles("C11"), Err(ChemError::SelfLoop { digit: 1 }));
    assert_eq!(parse_smiles("C12CC12"), Err(ChemError::DuplicateBond { digit: 2 }));
    assert_eq!(parse_smiles("C1C1"), Err(ChemError::DuplicateBond { digit: 1 }));
}

#[test]
fn validation_examples() {
    assert!(validate_molecule(&parse_smiles("CCO").unwrap()).is_ok());

    let v = validate_molecule(&parse_smiles("C(C)(C)(C)(C)C").unwrap()).unwrap_err();
    assert_eq!(v, vec![Violation { atom: 0, element: "C".into(), used: 5, max: 4 }]);

    assert!(validate_molecule(&parse_smiles("[NH4+]").unwrap()).is_ok());
    assert!(validate_molecule(&parse_smiles("[NH4]").unwrap()).is_err());
    assert!(validate_molecule(&parse_smiles("N(=O)=O").unwrap()).is_err());
    assert!(validate_molecule(&parse_smiles("C[N+](=O)[O-]").unwrap()).is_ok());
    assert!(validate_molecule(&parse_smiles("O=C=O").unwrap()).is_ok());
    assert!(validate_molecule(&parse_smiles("C#N").unwrap()).is_ok());
    assert!(validate_molecule(&parse_smiles("C=O=C").unwrap()).is_err());
    assert!(validate_molecule(&parse_smiles("FC(F)(F)F").unwrap()).is_ok());
    assert!(validate_molecule(&parse_smiles("F=C").unwrap()).is_err());
    assert!(validate_molecule(&parse_smiles("c1ccccc1").unwrap()).is_ok());
    assert!(validate_molecule(&parse_smiles("c1cc[nH]c1").unwrap()).is_ok());
    assert!(validate_molecule(&parse_smiles("OS(=O)(=O)O").unwrap()).is_ok());
    assert!(validate_molecule(&parse_smiles("[Na+].[Cl-]").unwrap()).is_ok());
    assert!(validate_molecule(&parse_smiles("[CH5]").unwrap()).is_err());

    assert!(is_valid_smiles("CC(C)CO"));
    assert!(!is_valid_smiles("CC(C"));
    assert!(!is_valid_smiles(""));
}

#[test]
fn charge_adjusted_valences() {
    assert_eq!(max_valence("N", 1), Some(4));
    assert_eq!(max_valence("N", -1), Some(2));
    assert_eq!(max_valence("O", 1), Some(3));
    assert_eq!(max_valence("C", 1), Some(3));
    assert_eq!(max_valence("C", -1), Some(3));
    assert_eq!(max_valence("B", -1), Some(4));
    assert_eq!(max_valence("Na", 1), None);
}

#[test]
fn fingerprint_examples() {
    let cco = parse_smiles("CCO").unwrap();
    assert_eq!(morgan_fingerprint(&cco, 2, 2048).unwrap(), morgan_fingerprint(&cco, 2, 2048).unwrap());

    let c = morgan_fingerprint(&parse_smiles("C").unwrap(), 0, 2048).unwrap();
    let o = morgan_fingerprint(&parse_smiles("O").unwrap(), 0, 2048).unwrap();
    assert_eq!(tanimoto(&c, &o).unwrap(), 0.0);

    // Terminal CH3, middle CH2 and OH are three distinct environments.
    let r0 = morgan_fingerprint(&cco, 0, 2048).unwrap();
    assert!(r0.count_ones() <= 3 && r0.count_ones() >= 1);

    let occ = parse_smiles("OCC").unwrap();
    for r in 0..4 {
        assert_eq!(morgan_fingerprint(&cco, r, 2048).unwrap(), morgan_fingerprint(&occ, r, 2048).unwrap());
    }
    let ccc = morgan_fingerprint(&parse_smiles("CCC").unwrap(), 2, 2048).unwrap();
    assert!(tanimoto(&morgan_fingerprint(&cco, 2, 2048).unwrap(), &ccc).unwrap() < 1.0);

    assert!(matches!(morgan_fingerprint(&cco, 2, 1000), Err(ChemError::Contract(_))));
}

#[test]
fn fingerprint_golden_bits() {
    let fp = morgan_fingerprint(&parse_smiles("CCO").unwrap(), 2, 2048).unwrap();
    assert_eq!(fp.ones(), GOLDEN_CCO_R2);
    let fp = morgan_fingerprint(&parse_smiles("c1ccccc1O").unwrap(), 1, 1024).unwrap();
    assert_eq!(fp.ones(), GOLDEN_PHENOL_R1);
}

const GOLDEN_CCO_R2: &[usize] = &[25, 949, 1026, 1092, 1148, 1208, 1871, 1992, 2042];
const GOLDEN_PHENOL_R1: &[usize] = &[5, 187, 285, 636, 638, 782, 1018];

#[test]
fn tanimoto_examples() {
    let a = Fingerprint::from_bits(64, &[1, 5, 9]).unwrap();
    assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
    let b = Fingerprint::from_bits(64, &[2, 6]).unwrap();
    assert_eq!(tanimoto(&a, &b).unwrap(), 0.0);
    let small = Fingerprint::from_bits(64, &[3, 4]).unwrap();
    let big = Fingerprint::from_bits(64, &[3, 4, 7, 8]).unwrap();
    assert_eq!(tanimoto(&small, &big).unwrap(), 0.5);
    let empty = Fingerprint::from_bits(64, &[]).unwrap();
    assert_eq!(tanimoto(&empty, &empty).unwrap(), 1.0);
    let other = Fingerprint::from_bits(128, &[1]).unwrap();
    assert!(matches!(tanimoto(&a, &other), Err(ChemError::Contract(_))));
    assert!(Fingerprint::from_bits(64, &[64]).is_err());
}

proptest! {
    #[test]
    fn token_spans_tile_input(s in "[CNOcn()=#1-3%\\[\\]H+.]{0,24}") {
        if let Ok(toks) = tokenize_smiles(&s) {
            let mut at = 0;
            for t in &toks {
                prop_assert_eq!(t.start, at);
                prop_assert!(t.end > t.start);
                at = t.end;
            }
            prop_assert_eq!(at, s.chars().count());
        }
    }

    #[test]
    fn linear_chains_are_valid(n in 1usize..80) {
        prop_assert!(is_valid_smiles(&"C".repeat(n)));
    }

    #[test]
    fn tanimoto_is_symmetric(a in prop::collection::btree_set(0usize..256, 0..40), b in prop::collection::btree_set(0usize..256, 0..40)) {
        let a: Vec<usize> = a.into_iter().collect();
        let b: Vec<usize> = b.into_iter().collect();
        let fa = Fingerprint::from_bits(256, &a).unwrap();
        let fb = Fingerprint::from_bits(256, &b).unwrap();
        prop_assert_eq!(tanimoto(&fa, &fb).unwrap(), tanimoto(&fb, &fa).unwrap());
        let t = tanimoto(&fa, &fb).unwrap();
        prop_assert!((0.0..=1.0).contains(&t));
        if !a.is_empty() {
            prop_assert_eq!(tanimoto(&fa, &fa).unwrap(), 1.0);
        }
    }

    #[test]
    fn chain_fingerprints_ignore_writing_direction(n in 1usize..12, r in 0usize..4) {
        let fwd = format!("{}O", "C".repeat(n));
        let rev = format!("O{}", "C".repeat(n));
        let a = morgan_fingerprint(&parse_smiles(&fwd).unwrap(), r, 1024).unwrap();
        let b = morgan_fingerprint(&parse_smiles(&rev).unwrap(), r, 1024).unwrap();
        prop_assert_eq!(a, b);
    }
}
