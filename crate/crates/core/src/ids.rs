// SPDX-License-Identifier: Apache-2.0

//! Ideographic Description Sequence parsing.
//!
//! An IDS is a prefix expression over layout operators (U+2FF0..U+2FFB) and
//! radical glyphs. Parsing yields a binary [`RadicalTree`] whose nodes carry
//! their depth and branch position. The two ternary operators are binarized
//! on the fly: `⿲abc` becomes `⿰a⿰bc` and `⿳abc` becomes `⿱a⿱bc`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty IDS")]
    EmptyInput,
    #[error("unbalanced expression at char {offset}: {reason}")]
    UnbalancedExpression { offset: usize, reason: &'static str },
    #[error("unknown symbol {symbol:?} at char {offset}")]
    UnknownSymbol { symbol: char, offset: usize },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read IDS table {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed IDS table line {0}")]
    MalformedLine(usize),
}

/// A radical glyph together with its dense index in a [`RadicalVocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RadicalId {
    pub symbol: char,
    pub index: u32,
}

/// Dense radical vocabulary. Indices follow insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RadicalVocab {
    symbols: Vec<char>,
    lookup: HashMap<char, u32>,
}

impl RadicalVocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from symbols in order. Duplicates and structural
    /// operators are skipped.
    pub fn from_symbols<I: IntoIterator<Item = char>>(symbols: I) -> Self {
        let mut vocab = Self::new();
        for s in symbols {
            vocab.insert(s);
        }
        vocab
    }

    /// Returns the id for `symbol`, adding it if absent. Operators and
    /// whitespace are never admitted.
    pub fn insert(&mut self, symbol: char) -> Option<RadicalId> {
        if StructOp::from_char(symbol).is_some() || symbol.is_whitespace() {
            return None;
        }
        if let Some(&index) = self.lookup.get(&symbol) {
            return Some(RadicalId { symbol, index });
        }
        let index = self.symbols.len() as u32;
        self.symbols.push(symbol);
        self.lookup.insert(symbol, index);
        Some(RadicalId { symbol, index })
    }

    pub fn get(&self, symbol: char) -> Option<RadicalId> {
        self.lookup.get(&symbol).map(|&index| RadicalId { symbol, index })
    }

    pub fn by_index(&self, index: u32) -> Option<RadicalId> {
        self.symbols
            .get(index as usize)
            .map(|&symbol| RadicalId { symbol, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn iter(&self) -> impl Iterator<Item = RadicalId> + '_ {
        self.symbols.iter().enumerate().map(|(i, &symbol)| RadicalId {
            symbol,
            index: i as u32,
        })
    }
}

/// Ideographic description characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StructOp {
    LeftRight,
    AboveBelow,
    LeftMidRight,
    AboveMidBelow,
    Surround,
    SurroundUpper,
    SurroundLower,
    SurroundLeft,
    SurroundUpperLeft,
    SurroundUpperRight,
    SurroundLowerLeft,
    Overlay,
}

impl StructOp {
    pub const ALL: [StructOp; 12] = [
        StructOp::LeftRight,
        StructOp::AboveBelow,
        StructOp::LeftMidRight,
        StructOp::AboveMidBelow,
        StructOp::Surround,
        StructOp::SurroundUpper,
        StructOp::SurroundLower,
        StructOp::SurroundLeft,
        StructOp::SurroundUpperLeft,
        StructOp::SurroundUpperRight,
        StructOp::SurroundLowerLeft,
        StructOp::Overlay,
    ];

    pub fn from_char(c: char) -> Option<Self> {
        Some(match c {
            '\u{2FF0}' => StructOp::LeftRight,
            '\u{2FF1}' => StructOp::AboveBelow,
            '\u{2FF2}' => StructOp::LeftMidRight,
            '\u{2FF3}' => StructOp::AboveMidBelow,
            '\u{2FF4}' => StructOp::Surround,
            '\u{2FF5}' => StructOp::SurroundUpper,
            '\u{2FF6}' => StructOp::SurroundLower,
            '\u{2FF7}' => StructOp::SurroundLeft,
            '\u{2FF8}' => StructOp::SurroundUpperLeft,
            '\u{2FF9}' => StructOp::SurroundUpperRight,
            '\u{2FFA}' => StructOp::SurroundLowerLeft,
            '\u{2FFB}' => StructOp::Overlay,
            _ => return None,
        })
    }

    pub fn to_char(self) -> char {
        match self {
            StructOp::LeftRight => '\u{2FF0}',
            StructOp::AboveBelow => '\u{2FF1}',
            StructOp::LeftMidRight => '\u{2FF2}',
            StructOp::AboveMidBelow => '\u{2FF3}',
            StructOp::Surround => '\u{2FF4}',
            StructOp::SurroundUpper => '\u{2FF5}',
            StructOp::SurroundLower => '\u{2FF6}',
            StructOp::SurroundLeft => '\u{2FF7}',
            StructOp::SurroundUpperLeft => '\u{2FF8}',
            StructOp::SurroundUpperRight => '\u{2FF9}',
            StructOp::SurroundLowerLeft => '\u{2FFA}',
            StructOp::Overlay => '\u{2FFB}',
        }
    }

    pub fn arity(self) -> usize {
        match self {
            StructOp::LeftMidRight | StructOp::AboveMidBelow => 3,
            _ => 2,
        }
    }

    /// The binary operator a ternary one is nested into.
    pub fn binary_kind(self) -> StructOp {
        match self {
            StructOp::LeftMidRight => StructOp::LeftRight,
            StructOp::AboveMidBelow => StructOp::AboveBelow,
            op => op,
        }
    }

    pub fn is_surround(self) -> bool {
        matches!(
            self,
            StructOp::Surround
                | StructOp::SurroundUpper
                | StructOp::SurroundLower
                | StructOp::SurroundLeft
                | StructOp::SurroundUpperLeft
                | StructOp::SurroundUpperRight
                | StructOp::SurroundLowerLeft
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            StructOp::LeftRight => "LeftRight",
            StructOp::AboveBelow => "AboveBelow",
            StructOp::LeftMidRight => "LeftMidRight",
            StructOp::AboveMidBelow => "AboveMidBelow",
            StructOp::Surround => "Surround",
            StructOp::SurroundUpper => "SurroundUpper",
            StructOp::SurroundLower => "SurroundLower",
            StructOp::SurroundLeft => "SurroundLeft",
            StructOp::SurroundUpperLeft => "SurroundUpperLeft",
            StructOp::SurroundUpperRight => "SurroundUpperRight",
            StructOp::SurroundLowerLeft => "SurroundLowerLeft",
            StructOp::Overlay => "Overlay",
        }
    }
}

impl fmt::Display for StructOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Branch position of a node: root, left child or right child.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pos {
    Root,
    Left,
    Right,
}

impl Pos {
    pub fn index(self) -> u8 {
        match self {
            Pos::Root => 0,
            Pos::Left => 1,
            Pos::Right => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeContent {
    Op(StructOp),
    Radical(RadicalId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub content: NodeContent,
    pub depth: u32,
    pub pos: Pos,
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Pre-order traversal.
    pub fn walk<'a>(&'a self, visit: &mut impl FnMut(&'a TreeNode)) {
        visit(self);
        for child in &self.children {
            child.walk(visit);
        }
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        self.walk(&mut |n| {
            if n.is_leaf() {
                out.push(n);
            }
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RadicalTree {
    pub root: TreeNode,
    pub leaf_sequence: Vec<RadicalId>,
    pub max_depth: u32,
}

impl RadicalTree {
    /// Annotates depth and branch position on a bare expression.
    pub fn from_expr(expr: &Expr) -> Self {
        let root = annotate(expr, 0, Pos::Root);
        let mut leaf_sequence = Vec::new();
        let mut max_depth = 0;
        root.walk(&mut |n| {
            max_depth = max_depth.max(n.depth);
            if let NodeContent::Radical(r) = n.content {
                leaf_sequence.push(r);
            }
        });
        RadicalTree {
            root,
            leaf_sequence,
            max_depth,
        }
    }

    pub fn len(&self) -> usize {
        self.leaf_sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_sequence.is_empty()
    }

    pub fn nodes(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        self.root.walk(&mut |n| out.push(n));
        out
    }

    pub fn to_expr(&self) -> Expr {
        fn go(n: &TreeNode) -> Expr {
            match n.content {
                NodeContent::Radical(r) => Expr::Leaf(r),
                NodeContent::Op(op) => Expr::Node(op, Box::new(go(&n.children[0])), Box::new(go(&n.children[1]))),
            }
        }
        go(&self.root)
    }
}

/// Un-annotated binary layout expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Leaf(RadicalId),
    Node(StructOp, Box<Expr>, Box<Expr>),
}

fn annotate(expr: &Expr, depth: u32, pos: Pos) -> TreeNode {
    match expr {
        Expr::Leaf(r) => TreeNode {
            content: NodeContent::Radical(*r),
            depth,
            pos,
            children: Vec::new(),
        },
        Expr::Node(op, left, right) => TreeNode {
            content: NodeContent::Op(*op),
            depth,
            pos,
            children: vec![
                annotate(left, depth + 1, Pos::Left),
                annotate(right, depth + 1, Pos::Right),
            ],
        },
    }
}

struct Parser<'a, F> {
    chars: Vec<char>,
    at: usize,
    resolve: &'a mut F,
}

impl<F: FnMut(char) -> Option<RadicalId>> Parser<'_, F> {
    fn expr(&mut self) -> Result<Expr, ParseError> {
        let Some(&c) = self.chars.get(self.at) else {
            return Err(ParseError::UnbalancedExpression {
                offset: self.at,
                reason: "operator is missing an operand",
            });
        };
        let offset = self.at;
        self.at += 1;
        match StructOp::from_char(c) {
            Some(op) => {
                let mut operands = Vec::with_capacity(op.arity());
                for _ in 0..op.arity() {
                    operands.push(self.expr()?);
                }
                let kind = op.binary_kind();
                let mut rest = operands.pop().expect("arity >= 2");
                while let Some(prev) = operands.pop() {
                    rest = Expr::Node(kind, Box::new(prev), Box::new(rest));
                }
                Ok(rest)
            }
            None => (self.resolve)(c)
                .map(Expr::Leaf)
                .ok_or(ParseError::UnknownSymbol { symbol: c, offset }),
        }
    }
}

fn parse_with<F: FnMut(char) -> Option<RadicalId>>(ids: &str, mut resolve: F) -> Result<RadicalTree, ParseError> {
    let chars: Vec<char> = ids.trim().chars().collect();
    if chars.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let mut parser = Parser {
        chars,
        at: 0,
        resolve: &mut resolve,
    };
    let expr = parser.expr()?;
    if parser.at != parser.chars.len() {
        return Err(ParseError::UnbalancedExpression {
            offset: parser.at,
            reason: "trailing tokens after a complete expression",
        });
    }
    Ok(RadicalTree::from_expr(&expr))
}

/// Parses an IDS against a fixed vocabulary.
pub fn parse_ids(ids: &str, vocab: &RadicalVocab) -> Result<RadicalTree, ParseError> {
    parse_with(ids, |c| vocab.get(c))
}

/// Parses an IDS, admitting any non-operator symbol into `vocab`.
pub fn parse_ids_open(ids: &str, vocab: &mut RadicalVocab) -> Result<RadicalTree, ParseError> {
    parse_with(ids, |c| vocab.insert(c))
}

/// Canonical prefix form using only binary operators.
pub fn serialize_ids(tree: &RadicalTree) -> String {
    fn go(n: &TreeNode, out: &mut String) {
        match n.content {
            NodeContent::Radical(r) => out.push(r.symbol),
            NodeContent::Op(op) => {
                out.push(op.to_char());
                for c in &n.children {
                    go(c, out);
                }
            }
        }
    }
    let mut out = String::new();
    go(&tree.root, &mut out);
    out
}

/// Multi-line dump, one node per line: indent, symbol, kind, depth, pos.
pub fn format_tree(tree: &RadicalTree) -> String {
    let mut out = String::new();
    tree.root.walk(&mut |n| {
        let indent = "  ".repeat(n.depth as usize);
        let (symbol, kind) = match n.content {
            NodeContent::Op(op) => (op.to_char(), op.name()),
            NodeContent::Radical(r) => (r.symbol, "Radical"),
        };
        out.push_str(&format!(
            "{indent}{symbol} {kind} depth={} pos={}\n",
            n.depth,
            n.pos.index()
        ));
    });
    out
}

#[derive(Debug, Clone)]
pub struct IdsRecord {
    pub line: usize,
    pub label: String,
    pub tree: RadicalTree,
}

#[derive(Debug, Clone)]
pub struct RejectedRecord {
    pub line: usize,
    pub label: String,
    pub ids: String,
    pub error: ParseError,
}

/// Result of reading an IDS table: parsed records in file order plus every
/// record that failed to parse.
#[derive(Debug, Clone, Default)]
pub struct IdsTable {
    pub records: Vec<IdsRecord>,
    pub rejected: Vec<RejectedRecord>,
    pub vocab: RadicalVocab,
}

fn strip_tags(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    let mut depth = 0usize;
    for c in field.chars() {
        match c {
            '[' => depth += 1,
            ']' if depth > 0 => depth -= 1,
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    out.trim().to_string()
}

fn valid_codepoint(field: &str) -> bool {
    field
        .strip_prefix("U+")
        .or_else(|| field.strip_prefix("U-"))
        .is_some_and(|hex| !hex.is_empty() && u32::from_str_radix(hex, 16).is_ok())
}

/// Parses IDS table text. With `vocab = None` every non-operator symbol is
/// admitted as a radical; otherwise records using other symbols are
/// rejected and reported.
pub fn parse_ids_table(text: &str, vocab: Option<&RadicalVocab>) -> Result<IdsTable, IngestError> {
    let mut table = IdsTable {
        vocab: vocab.cloned().unwrap_or_default(),
        ..IdsTable::default()
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || !valid_codepoint(fields[0].trim()) {
            return Err(IngestError::MalformedLine(line_no));
        }
        let label = fields[1].trim().to_string();
        let ids = strip_tags(fields[2]);
        if label.is_empty() || ids.is_empty() {
            return Err(IngestError::MalformedLine(line_no));
        }
        let parsed = match vocab {
            Some(v) => parse_ids(&ids, v),
            None => parse_ids_open(&ids, &mut table.vocab),
        };
        match parsed {
            Ok(tree) => table.records.push(IdsRecord {
                line: line_no,
                label,
                tree,
            }),
            Err(error) => table.rejected.push(RejectedRecord {
                line: line_no,
                label,
                ids,
                error,
            }),
        }
    }
    Ok(table)
}

pub fn ingest_ids_table(path: impl AsRef<Path>, vocab: Option<&RadicalVocab>) -> Result<IdsTable, IngestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| IngestError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    parse_ids_table(&text, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> RadicalVocab {
        RadicalVocab::from_symbols("abc".chars())
    }

    #[test]
    fn single_radical() {
        let vocab = RadicalVocab::from_symbols(['木']);
        let t = parse_ids("木", &vocab).unwrap();
        assert!(t.root.is_leaf());
        assert_eq!((t.root.depth, t.root.pos), (0, Pos::Root));
        assert_eq!(t.len(), 1);
        assert_eq!(t.max_depth, 0);
        assert_eq!(serialize_ids(&t), "木");
    }

    #[test]
    fn shen_tree() {
        let vocab = RadicalVocab::from_symbols("氵穴木".chars());
        let t = parse_ids("⿰氵⿱穴木", &vocab).unwrap();
        assert_eq!(t.root.content, NodeContent::Op(StructOp::LeftRight));
        let left = &t.root.children[0];
        let right = &t.root.children[1];
        assert_eq!(left.content, NodeContent::Radical(vocab.get('氵').unwrap()));
        assert_eq!((left.depth, left.pos), (1, Pos::Left));
        assert_eq!(right.content, NodeContent::Op(StructOp::AboveBelow));
        assert_eq!((right.depth, right.pos), (1, Pos::Right));
        assert_eq!((right.children[0].depth, right.children[0].pos), (2, Pos::Left));
        assert_eq!((right.children[1].depth, right.children[1].pos), (2, Pos::Right));
        let seq: String = t.leaf_sequence.iter().map(|r| r.symbol).collect();
        assert_eq!(seq, "氵穴木");
        assert_eq!(serialize_ids(&t), "⿰氵⿱穴木");
    }

    #[test]
    fn ternary_is_nested_to_the_right() {
        let t = parse_ids("⿳abc", &abc()).unwrap();
        assert_eq!(serialize_ids(&t), "⿱a⿱bc");
        assert_eq!(t.len(), 3);
        assert_eq!(t.max_depth, 2);
        let t = parse_ids("⿲abc", &abc()).unwrap();
        assert_eq!(serialize_ids(&t), "⿰a⿰bc");
    }

    #[test]
    fn errors() {
        assert_eq!(parse_ids("", &abc()), Err(ParseError::EmptyInput));
        assert_eq!(parse_ids("  ", &abc()), Err(ParseError::EmptyInput));
        assert!(matches!(
            parse_ids("⿰a", &abc()),
            Err(ParseError::UnbalancedExpression { .. })
        ));
        assert!(matches!(
            parse_ids("⿳ab", &abc()),
            Err(ParseError::UnbalancedExpression { .. })
        ));
        assert!(matches!(
            parse_ids("ab", &abc()),
            Err(ParseError::UnbalancedExpression { offset: 1, .. })
        ));
        assert_eq!(
            parse_ids("⿰az", &abc()),
            Err(ParseError::UnknownSymbol { symbol: 'z', offset: 2 })
        );
    }

    #[test]
    fn vocab_rejects_operators() {
        let mut v = RadicalVocab::new();
        assert!(v.insert('⿰').is_none());
        assert_eq!(v.insert('a').unwrap().index, 0);
        assert_eq!(v.insert('b').unwrap().index, 1);
        assert_eq!(v.insert('a').unwrap().index, 0);
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn table_lines() {
        let text = "# header\n; another\nU+6DF1\t深\t⿰氵⿱穴木\nU+4E00\t一\t一\n\
                    U+68EE\t森\t⿱木⿰木木[GTKV]\t⿳木木木[J]\n";
        let table = parse_ids_table(text, None).unwrap();
        assert!(table.rejected.is_empty());
        let labels: Vec<_> = table.records.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["深", "一", "森"]);
        assert_eq!(serialize_ids(&table.records[0].tree), "⿰氵⿱穴木");
        assert!(table.records[1].tree.root.is_leaf());
        assert_eq!(serialize_ids(&table.records[2].tree), "⿱木⿰木木");
        assert_eq!(table.records[2].line, 5);
    }

    #[test]
    fn table_reports_unknown_symbols() {
        let vocab = RadicalVocab::from_symbols("氵穴".chars());
        let text = "U+6DF1\t深\t⿰氵⿱穴木\nU+6C35\t氵\t氵\n";
        let table = parse_ids_table(text, Some(&vocab)).unwrap();
        assert_eq!(table.records.len(), 1);
        assert_eq!(table.rejected.len(), 1);
        assert_eq!(table.rejected[0].line, 1);
        assert!(matches!(
            table.rejected[0].error,
            ParseError::UnknownSymbol { symbol: '木', .. }
        ));
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(
            parse_ids_table("U+6DF1\t深\n", None),
            Err(IngestError::MalformedLine(1))
        ));
        assert!(matches!(
            parse_ids_table("# c\nX6DF1\t深\t深\n", None),
            Err(IngestError::MalformedLine(2))
        ));
    }

    #[test]
    fn missing_file_is_io_failure() {
        assert!(matches!(
            ingest_ids_table("/nonexistent/ids.txt", None),
            Err(IngestError::IoFailure { .. })
        ));
    }

    #[test]
    fn dump_format() {
        let mut vocab = RadicalVocab::new();
        let t = parse_ids_open("⿰氵⿱穴木", &mut vocab).unwrap();
        let dump = format_tree(&t);
        let lines: Vec<_> = dump.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "⿰ LeftRight depth=0 pos=0");
        assert_eq!(lines[1], "  氵 Radical depth=1 pos=1");
        assert_eq!(lines[4], "    木 Radical depth=2 pos=2");
    }
}
