// SPDX-License-Identifier: Apache-2.0

use easa_core::ids::{
    ingest_ids_table, parse_ids, parse_ids_open, parse_ids_table, serialize_ids, NodeContent, ParseError, Pos,
    RadicalTree, RadicalVocab, TreeNode,
};
use proptest::prelude::*;

fn corpus() -> Vec<&'static str> {
    include_str!("data/ids_corpus.txt")
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

/// Independent oracle tree: operator symbol or radical symbol.
#[derive(Debug, Clone, PartialEq)]
enum O {
    Leaf(char),
    Op(char, Box<O>, Box<O>),
}

fn arity(c: char) -> Option<usize> {
    match c as u32 {
        0x2FF2 | 0x2FF3 => Some(3),
        0x2FF0..=0x2FFB => Some(2),
        _ => None,
    }
}

fn binary_of(c: char) -> char {
    match c {
        '⿲' => '⿰',
        '⿳' => '⿱',
        c => c,
    }
}

fn oracle(chars: &[char], at: &mut usize) -> O {
    let c = chars[*at];
    *at += 1;
    match arity(c) {
        None => O::Leaf(c),
        Some(2) => {
            let a = oracle(chars, at);
            let b = oracle(chars, at);
            O::Op(c, Box::new(a), Box::new(b))
        }
        Some(_) => {
            let a = oracle(chars, at);
            let b = oracle(chars, at);
            let d = oracle(chars, at);
            let k = binary_of(c);
            O::Op(k, Box::new(a), Box::new(O::Op(k, Box::new(b), Box::new(d))))
        }
    }
}

fn oracle_parse(s: &str) -> O {
    let chars: Vec<char> = s.chars().collect();
    let mut at = 0;
    let t = oracle(&chars, &mut at);
    assert_eq!(at, chars.len(), "oracle consumed everything");
    t
}

fn oracle_string(o: &O) -> String {
    match o {
        O::Leaf(c) => c.to_string(),
        O::Op(c, a, b) => format!("{c}{}{}", oracle_string(a), oracle_string(b)),
    }
}

fn symbol(n: &TreeNode) -> char {
    match n.content {
        NodeContent::Op(op) => op.to_char(),
        NodeContent::Radical(r) => r.symbol,
    }
}

/// Structural agreement plus the depth and position annotations.
fn agrees(n: &TreeNode, o: &O, depth: u32, pos: u8) -> bool {
    if n.depth != depth || n.pos.index() != pos {
        return false;
    }
    match o {
        O::Leaf(c) => n.is_leaf() && symbol(n) == *c,
        O::Op(c, a, b) => {
            n.children.len() == 2
                && symbol(n) == *c
                && agrees(&n.children[0], a, depth + 1, 1)
                && agrees(&n.children[1], b, depth + 1, 2)
        }
    }
}

fn check_laws(t: &RadicalTree) {
    let nodes = t.nodes();
    assert_eq!(nodes.iter().filter(|n| n.pos == Pos::Root).count(), 1);
    for n in &nodes {
        assert!(n.children.is_empty() || n.children.len() == 2);
        for c in &n.children {
            assert_eq!(c.depth, n.depth + 1);
            assert_ne!(c.pos, Pos::Root);
        }
    }
    let internal = nodes.iter().filter(|n| !n.is_leaf()).count();
    assert_eq!(internal + 1, t.len());
    let in_order: Vec<_> = t
        .root
        .leaves()
        .iter()
        .map(|n| match n.content {
            NodeContent::Radical(r) => r,
            NodeContent::Op(_) => unreachable!(),
        })
        .collect();
    assert_eq!(in_order, t.leaf_sequence);
    assert_eq!(t.max_depth, nodes.iter().map(|n| n.depth).max().unwrap());
}

#[test]
fn corpus_round_trips_and_matches_oracle() {
    let corpus = corpus();
    assert!(corpus.len() >= 50);
    assert!(corpus.contains(&"⿰氵⿱穴木"));
    let mut vocab = RadicalVocab::new();
    for ids in corpus {
        let t = parse_ids_open(ids, &mut vocab).unwrap();
        let o = oracle_parse(ids);
        assert!(agrees(&t.root, &o, 0, 0), "{ids}");
        check_laws(&t);
        let s = serialize_ids(&t);
        assert_eq!(s, oracle_string(&o), "{ids}");
        let again = parse_ids(&s, &vocab).unwrap();
        assert_eq!(again, t, "{ids}");
        let radicals = ids.chars().filter(|&c| arity(c).is_none()).count();
        assert_eq!(t.len(), radicals);
    }
}

#[test]
fn ternary_binarization() {
    let vocab = RadicalVocab::from_symbols("abc".chars());
    let t = parse_ids("⿳abc", &vocab).unwrap();
    assert_eq!(serialize_ids(&t), "⿱a⿱bc");
    assert_eq!((t.len(), t.max_depth), (3, 2));
    let t = parse_ids("⿲abc", &vocab).unwrap();
    assert_eq!(serialize_ids(&t), "⿰a⿰bc");
}

#[test]
fn errors() {
    let vocab = RadicalVocab::from_symbols("ab".chars());
    assert_eq!(parse_ids("", &vocab), Err(ParseError::EmptyInput));
    assert!(matches!(
        parse_ids("⿰a", &vocab),
        Err(ParseError::UnbalancedExpression { .. })
    ));
    assert!(matches!(
        parse_ids("⿰ab b", &vocab),
        Err(ParseError::UnbalancedExpression { .. }) | Err(ParseError::UnknownSymbol { .. })
    ));
    assert_eq!(
        parse_ids("⿰az", &vocab),
        Err(ParseError::UnknownSymbol { symbol: 'z', offset: 2 })
    );
}

#[test]
fn table_ingest() {
    let text = "# header\n; note\nU+6DF1\t深\t⿰氵⿱穴木\nU+4E00\t一\t一\nU+4F11\t休\t⿰亻木[GTK]\t⿰亻朩\n";
    let t = parse_ids_table(text, None).unwrap();
    let got: Vec<(&str, String)> = t
        .records
        .iter()
        .map(|r| (r.label.as_str(), serialize_ids(&r.tree)))
        .collect();
    assert_eq!(
        got,
        [
            ("深", "⿰氵⿱穴木".to_string()),
            ("一", "一".to_string()),
            ("休", "⿰亻木".to_string())
        ]
    );
    assert_eq!(t.records[0].line, 3);

    let vocab = RadicalVocab::from_symbols("氵穴木".chars());
    let t = parse_ids_table(text, Some(&vocab)).unwrap();
    assert_eq!(t.records.len(), 1);
    let rejected: Vec<&str> = t.rejected.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(rejected, ["一", "休"]);

    assert!(parse_ids_table("U+6DF1 深 ⿰氵⿱穴木\n", None).is_err());
    assert!(ingest_ids_table("/nonexistent/ids.txt", None).is_err());
}

const OPS: [char; 12] = ['⿰', '⿱', '⿲', '⿳', '⿴', '⿵', '⿶', '⿷', '⿸', '⿹', '⿺', '⿻'];

fn source_expr() -> impl Strategy<Value = String> {
    let leaf = prop::sample::select(vec!['一', '丨', '丶', '丿', '乙', '亅', '二', '亠']).prop_map(|c| c.to_string());
    leaf.prop_recursive(4, 40, 3, |inner| {
        (prop::sample::select(OPS.to_vec()), prop::collection::vec(inner, 3)).prop_map(|(op, kids)| {
            let n = arity(op).unwrap();
            let mut s = op.to_string();
            for k in &kids[..n] {
                s.push_str(k);
            }
            s
        })
    })
}

proptest! {
    #[test]
    fn random_expressions_round_trip(ids in source_expr()) {
        let mut vocab = RadicalVocab::new();
        let t = parse_ids_open(&ids, &mut vocab).unwrap();
        let o = oracle_parse(&ids);
        prop_assert!(agrees(&t.root, &o, 0, 0));
        check_laws(&t);
        let s = serialize_ids(&t);
        prop_assert_eq!(&s, &oracle_string(&o));
        prop_assert_eq!(parse_ids(&s, &vocab).unwrap(), t);
        prop_assert!(!s.contains('⿲') && !s.contains('⿳'));
    }
}
