//! Declarative computation graphs over dataset columns.
//!
//! A graph is a DAG rooted at the dataset source. Inner nodes transform the
//! per-entry view (`Define` adds a column, `Filter` prunes entries); leaves
//! are actions that accumulate into mergeable results. Graphs travel as text
//! and are parsed and typechecked at the worker.
//!
//! Text format, one statement per `;`:
//!
//! ```text
//! def mass2(a, b) = a*a + b*b;        # helper function
//! define m = sqrt(mass2(c0, c1));     # new column
//! filter m < 0.9;                     # prune entries
//! count 0;                            # actions carry their result id
//! sum 1 c2;
//! mean 2 m;
//! histo1d 3 m 50 0 1.5;
//! ```
//!
//! Statements chain linearly: each attaches to the most recent non-action
//! statement (actions are always leaves). Branching graphs use an explicit
//! placement prefix: `node <id> parent <id|root>: <statement>`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClusterInfo, DatasetDescriptor, EntryRange, ValueSource};
use crate::expr::{
    lex, parse_expr_bp, parse_helper, Builtin, Expr, HelperFunction, ParseError, Pos, Tok,
    TokenCursor, UnaryOp,
};
use crate::result::{Accumulator, PartialResult};

pub const ROOT_PARENT: Option<u32> = None;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionKind {
    Count,
    Sum { column: String },
    Mean { column: String },
    Histo1D { column: String, nbins: u32, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Define { name: String, expr: Expr },
    Filter { expr: Expr },
    Action { action_id: u32, kind: ActionKind },
}

impl NodeKind {
    pub fn is_action(&self) -> bool {
        matches!(self, NodeKind::Action { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: u32,
    /// `None` attaches directly to the dataset source.
    pub parent: Option<u32>,
    pub kind: NodeKind,
}

/// A parsed mapper script: nodes, helper functions, and the original text
/// (which is what travels in the payload).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputationGraph {
    pub nodes: Vec<GraphNode>,
    pub helpers: Vec<HelperFunction>,
    pub source: String,
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

fn expect_number(cur: &mut TokenCursor, what: &str) -> Result<(f64, Pos), ParseError> {
    let t = cur.peek().clone();
    match t.tok {
        Tok::Number(n) => {
            cur.next();
            Ok((n, t.pos))
        }
        Tok::Minus => {
            cur.next();
            let (n, _) = expect_number(cur, what)?;
            Ok((-n, t.pos))
        }
        other => Err(parse_err(t.pos, format!("expected {what}, found {other}"), what)),
    }
}

fn expect_u32(cur: &mut TokenCursor, what: &str) -> Result<u32, ParseError> {
    let (n, pos) = expect_number(cur, what)?;
    if n < 0.0 || n.fract() != 0.0 || n > f64::from(u32::MAX) {
        return Err(parse_err(pos, format!("expected non-negative integer {what}, got {n}"), what));
    }
    Ok(n as u32)
}

fn parse_err(pos: Pos, message: String, expected: &str) -> ParseError {
    ParseError { pos, message, expected: vec![expected.to_string()] }
}

impl ComputationGraph {
    /// Parse the graph text format. Statement ids are assigned sequentially
    /// unless an explicit `node <id> parent <pid>:` prefix overrides them.
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        let mut cur = TokenCursor::new(lex(source)?);
        let mut nodes: Vec<GraphNode> = Vec::new();
        let mut helpers: Vec<HelperFunction> = Vec::new();
        let mut next_id = 0u32;
        // Implicit parent: the most recent structural (non-action) node.
        let mut spine: Option<u32> = None;

        while !cur.at_eof() {
            let t = cur.peek().clone();
            let (name, pos) = match &t.tok {
                Tok::Ident(name) => (name.clone(), t.pos),
                other => {
                    return Err(parse_err(t.pos, format!("expected statement, found {other}"), "statement"))
                }
            };

            if name == "def" {
                let h = parse_helper(&mut cur)?;
                if helpers.iter().any(|x| x.name == h.name) {
                    return Err(parse_err(pos, format!("duplicate helper {:?}", h.name), "unique helper name"));
                }
                helpers.push(h);
                continue;
            }

            // Optional explicit placement prefix.
            let (explicit_id, explicit_parent) = if name == "node" {
                cur.next();
                let id = expect_u32(&mut cur, "node id")?;
                let (kw, kpos) = cur.expect_ident("parent")?;
                if kw != "parent" {
                    return Err(parse_err(kpos, format!("expected parent, found {kw}"), "parent"));
                }
                let parent = match cur.peek().tok.clone() {
                    Tok::Ident(s) if s == "root" => {
                        cur.next();
                        None
                    }
                    _ => Some(expect_u32(&mut cur, "parent node id")?),
                };
                cur.expect(&Tok::Colon, ":")?;
                (Some(id), Some(parent))
            } else {
                (None, None)
            };

            let (stmt, spos) = cur.expect_ident("statement keyword")?;
            let kind = match stmt.as_str() {
                "define" => {
                    let (name, _) = cur.expect_ident("column name")?;
                    cur.expect(&Tok::Assign, "=")?;
                    let expr = parse_expr_bp(&mut cur, 1)?;
                    cur.expect(&Tok::Semi, ";")?;
                    NodeKind::Define { name, expr }
                }
                "filter" => {
                    let expr = parse_expr_bp(&mut cur, 1)?;
                    cur.expect(&Tok::Semi, ";")?;
                    NodeKind::Filter { expr }
                }
                "count" => {
                    let id = expect_u32(&mut cur, "action id")?;
                    cur.expect(&Tok::Semi, ";")?;
                    NodeKind::Action { action_id: id, kind: ActionKind::Count }
                }
                "sum" | "mean" => {
                    let id = expect_u32(&mut cur, "action id")?;
                    let (column, _) = cur.expect_ident("column name")?;
                    cur.expect(&Tok::Semi, ";")?;
                    let kind = if stmt == "sum" {
                        ActionKind::Sum { column }
                    } else {
                        ActionKind::Mean { column }
                    };
                    NodeKind::Action { action_id: id, kind }
                }
                "histo1d" => {
                    let id = expect_u32(&mut cur, "action id")?;
                    let (column, _) = cur.expect_ident("column name")?;
                    let nbins = expect_u32(&mut cur, "nbins")?;
                    let (lo, _) = expect_number(&mut cur, "lo")?;
                    let (hi, _) = expect_number(&mut cur, "hi")?;
                    cur.expect(&Tok::Semi, ";")?;
                    NodeKind::Action { action_id: id, kind: ActionKind::Histo1D { column, nbins, lo, hi } }
                }
                other => {
                    return Err(parse_err(
                        spos,
                        format!("unknown statement {other:?}"),
                        "define|filter|count|sum|mean|histo1d|def|node",
                    ))
                }
            };

            let id = match explicit_id {
                Some(id) => {
                    if nodes.iter().any(|n| n.id == id) {
                        return Err(parse_err(pos, format!("duplicate node id {id}"), "unique node id"));
                    }
                    next_id = next_id.max(id + 1);
                    id
                }
                None => {
                    while nodes.iter().any(|n| n.id == next_id) {
                        next_id += 1;
                    }
                    let id = next_id;
                    next_id += 1;
                    id
                }
            };
            let parent = match explicit_parent {
                Some(p) => {
                    if let Some(pid) = p {
                        if !nodes.iter().any(|n| n.id == pid) {
                            return Err(parse_err(pos, format!("unknown parent node {pid}"), "earlier node id"));
                        }
                    }
                    p
                }
                None => spine,
            };

            if !kind.is_action() {
                spine = Some(id);
            }
            nodes.push(GraphNode { id, parent, kind });
        }

        Ok(ComputationGraph { nodes, helpers, source: source.to_string() })
    }

    /// Regenerate a text form that parses back to an equivalent graph.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for h in &self.helpers {
            out.push_str(&h.to_string());
            out.push('\n');
        }
        // Detect whether linear chaining reproduces the structure; if not,
        // fall back to explicit placement on every statement.
        let mut spine: Option<u32> = None;
        let mut linear = true;
        for n in &self.nodes {
            if n.parent != spine {
                linear = false;
                break;
            }
            if !n.kind.is_action() {
                spine = Some(n.id);
            }
        }
        for n in &self.nodes {
            if !linear {
                match n.parent {
                    Some(p) => out.push_str(&format!("node {} parent {}: ", n.id, p)),
                    None => out.push_str(&format!("node {} parent root: ", n.id)),
                }
            }
            let stmt = match &n.kind {
                NodeKind::Define { name, expr } => format!("define {name} = {expr};"),
                NodeKind::Filter { expr } => format!("filter {expr};"),
                NodeKind::Action { action_id, kind } => match kind {
                    ActionKind::Count => format!("count {action_id};"),
                    ActionKind::Sum { column } => format!("sum {action_id} {column};"),
                    ActionKind::Mean { column } => format!("mean {action_id} {column};"),
                    ActionKind::Histo1D { column, nbins, lo, hi } => {
                        format!("histo1d {action_id} {column} {nbins} {lo} {hi};")
                    }
                },
            };
            out.push_str(&stmt);
            out.push('\n');
        }
        out
    }

    pub fn action_ids(&self) -> Vec<u32> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Action { action_id, .. } => Some(*action_id),
                _ => None,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Typecheck + compile
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Error, PartialEq)]
#[error("type error{}: {message}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
pub struct TypeError {
    pub node: Option<u32>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Num,
    Bool,
}

/// Expression compiled to slot references; no name lookups at runtime.
#[derive(Debug, Clone, PartialEq)]
enum CExpr {
    Const(f64),
    Slot(u32),
    Param(u32),
    Unary(UnaryOp, Box<CExpr>),
    Binary(crate::expr::BinaryOp, Box<CExpr>, Box<CExpr>),
    Builtin(Builtin, Vec<CExpr>),
    Helper(u32, Vec<CExpr>),
}

#[derive(Debug, Clone)]
struct CHelper {
    nparams: usize,
    body: CExpr,
}

#[derive(Debug, Clone)]
enum CNodeKind {
    Define { slot: u32, expr: CExpr },
    Filter { expr: CExpr },
    Action { acc_idx: usize },
}

#[derive(Debug, Clone)]
struct CNode {
    kind: CNodeKind,
    children: Vec<usize>,
}

/// A typechecked graph ready for execution.
#[derive(Debug, Clone)]
pub struct CompiledGraph {
    ncols: usize,
    nslots: usize,
    roots: Vec<usize>,
    nodes: Vec<CNode>,
    helpers: Vec<CHelper>,
    /// `(action id, template accumulator, column slot)` per action, in node
    /// order. Count has no input column; slot is unused there.
    actions: Vec<(u32, Accumulator, u32)>,
}

struct Checker<'a> {
    graph: &'a ComputationGraph,
    columns: Vec<String>,
    helper_sigs: Vec<(String, usize)>,
    chelpers: Vec<CHelper>,
}

impl ComputationGraph {
    /// Validate the graph against a dataset and produce the executable form.
    ///
    /// Checks: column/function names resolve, filters are boolean, defines
    /// and action inputs numeric, define names unique along any path, action
    /// nodes are leaves, action ids unique, histogram binning sane, at least
    /// one action present.
    pub fn typecheck(&self, d: &DatasetDescriptor) -> Result<CompiledGraph, TypeError> {
        let err = |node: Option<u32>, message: String| TypeError { node, message };

        if !self.nodes.iter().any(|n| n.kind.is_action()) {
            return Err(err(None, "graph has no action nodes".into()));
        }

        // Helper set: unique names, bodies reference only params + builtins.
        let mut checker = Checker {
            graph: self,
            columns: d.columns.clone(),
            helper_sigs: Vec::new(),
            chelpers: Vec::new(),
        };
        for h in &self.helpers {
            if Builtin::lookup(&h.name).is_some() {
                return Err(err(None, format!("helper {:?} shadows a builtin", h.name)));
            }
            if checker.helper_sigs.iter().any(|(n, _)| n == &h.name) {
                return Err(err(None, format!("duplicate helper {:?}", h.name)));
            }
            let mut seen = std::collections::BTreeSet::new();
            for p in &h.params {
                if !seen.insert(p.as_str()) {
                    return Err(err(None, format!("helper {:?} repeats parameter {p:?}", h.name)));
                }
            }
            if h.params.len() > 8 {
                return Err(err(None, format!("helper {:?} has more than 8 parameters", h.name)));
            }
            let (cbody, ty) = checker
                .compile_helper_body(&h.body, &h.params)
                .map_err(|m| err(None, format!("helper {:?}: {m}", h.name)))?;
            if ty != Ty::Num {
                return Err(err(None, format!("helper {:?} must return a number", h.name)));
            }
            checker.helper_sigs.push((h.name.clone(), h.params.len()));
            checker.chelpers.push(CHelper { nparams: h.params.len(), body: cbody });
        }

        // Index nodes, resolve parents, find roots.
        let mut index_of = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index_of.insert(n.id, i).is_some() {
                return Err(err(Some(n.id), "duplicate node id".into()));
            }
        }
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        let mut roots = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match n.parent {
                None => roots.push(i),
                Some(pid) => {
                    let &pi = index_of
                        .get(&pid)
                        .ok_or_else(|| err(Some(n.id), format!("unknown parent {pid}")))?;
                    if self.nodes[pi].kind.is_action() {
                        return Err(err(Some(n.id), "action nodes must be leaves".into()));
                    }
                    children[pi].push(i);
                }
            }
        }

        // Unique action ids.
        let mut action_ids = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if let NodeKind::Action { action_id, .. } = &n.kind {
                if !action_ids.insert(*action_id) {
                    return Err(err(Some(n.id), format!("duplicate action id {action_id}")));
                }
            }
        }

        // Walk from roots carrying the visible-column scope; assign slots.
        let ncols = d.columns.len();
        let mut cnodes: Vec<Option<CNode>> = vec![None; self.nodes.len()];
        let mut actions = Vec::new();
        let mut nslots = ncols as u32;
        let base_scope: Vec<(String, u32)> = d
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i as u32))
            .collect();

        // Iterative DFS with explicit scope stack so sibling branches do not
        // see each other's defines.
        struct Frame {
            node: usize,
            scope_len: usize,
        }
        let mut scope = base_scope;
        let mut stack: Vec<Frame> = roots.iter().rev().map(|&node| Frame { node, scope_len: scope.len() }).collect();
        let mut visited = vec![false; self.nodes.len()];
        while let Some(Frame { node, scope_len }) = stack.pop() {
            scope.truncate(scope_len);
            if visited[node] {
                return Err(err(Some(self.nodes[node].id), "graph contains a cycle or shared node".into()));
            }
            visited[node] = true;
            let n = &self.nodes[node];
            let ckind = match &n.kind {
                NodeKind::Define { name, expr } => {
                    if scope.iter().any(|(s, _)| s == name) {
                        return Err(err(
                            Some(n.id),
                            format!("define {name:?} shadows an existing column on this path"),
                        ));
                    }
                    let (cexpr, ty) = checker
                        .compile_expr(expr, &scope)
                        .map_err(|m| err(Some(n.id), m))?;
                    if ty != Ty::Num {
                        return Err(err(Some(n.id), format!("define {name:?} must be numeric")));
                    }
                    let slot = nslots;
                    nslots += 1;
                    scope.push((name.clone(), slot));
                    CNodeKind::Define { slot, expr: cexpr }
                }
                NodeKind::Filter { expr } => {
                    let (cexpr, ty) = checker
                        .compile_expr(expr, &scope)
                        .map_err(|m| err(Some(n.id), m))?;
                    if ty != Ty::Bool {
                        return Err(err(Some(n.id), "filter expression must be boolean".into()));
                    }
                    CNodeKind::Filter { expr: cexpr }
                }
                NodeKind::Action { action_id, kind } => {
                    let column_slot = |col: &String| -> Result<u32, TypeError> {
                        scope
                            .iter()
                            .find(|(s, _)| s == col)
                            .map(|(_, slot)| *slot)
                            .ok_or_else(|| err(Some(n.id), format!("unknown column {col:?}")))
                    };
                    let (template, slot) = match kind {
                        ActionKind::Count => (Accumulator::new_count(), 0),
                        ActionKind::Sum { column } => (Accumulator::new_sum(), column_slot(column)?),
                        ActionKind::Mean { column } => (Accumulator::new_mean(), column_slot(column)?),
                        ActionKind::Histo1D { column, nbins, lo, hi } => {
                            if *nbins < 1 {
                                return Err(err(Some(n.id), "histo1d requires nbins >= 1".into()));
                            }
                            if !(lo < hi) {
                                return Err(err(Some(n.id), "histo1d requires lo < hi".into()));
                            }
                            (Accumulator::new_histo(*nbins, *lo, *hi), column_slot(column)?)
                        }
                    };
                    let acc_idx = actions.len();
                    actions.push((*action_id, template, slot));
                    CNodeKind::Action { acc_idx }
                }
            };
            cnodes[node] = Some(CNode { kind: ckind, children: children[node].clone() });
            let child_scope_len = scope.len();
            for &c in children[node].iter().rev() {
                stack.push(Frame { node: c, scope_len: child_scope_len });
            }
        }

        if let Some(i) = visited.iter().position(|v| !v) {
            return Err(err(Some(self.nodes[i].id), "node not reachable from the source".into()));
        }

        let root_indices: Vec<usize> = roots;
        Ok(CompiledGraph {
            ncols,
            nslots: nslots as usize,
            roots: root_indices,
            nodes: cnodes.into_iter().map(Option::unwrap).collect(),
            helpers: checker.chelpers,
            actions,
        })
    }
}

impl Checker<'_> {
    fn compile_helper_body(&self, e: &Expr, params: &[String]) -> Result<(CExpr, Ty), String> {
        self.compile_rec(
            e,
            &|name| {
                params
                    .iter()
                    .position(|p| p == name)
                    .map(|i| CExpr::Param(i as u32))
            },
            false,
        )
    }

    fn compile_expr(&self, e: &Expr, scope: &[(String, u32)]) -> Result<(CExpr, Ty), String> {
        self.compile_rec(
            e,
            &|name| {
                scope
                    .iter()
                    .find(|(s, _)| s == name)
                    .map(|(_, slot)| CExpr::Slot(*slot))
            },
            true,
        )
    }

    fn compile_rec(
        &self,
        e: &Expr,
        resolve: &dyn Fn(&str) -> Option<CExpr>,
        allow_helpers: bool,
    ) -> Result<(CExpr, Ty), String> {
        use crate::expr::BinaryOp::*;
        Ok(match e {
            Expr::Number(n) => (CExpr::Const(*n), Ty::Num),
            Expr::Ident(name) => {
                let c = resolve(name).ok_or_else(|| format!("unknown column {name:?}"))?;
                (c, Ty::Num)
            }
            Expr::Unary(op, inner) => {
                let (ci, ty) = self.compile_rec(inner, resolve, allow_helpers)?;
                match op {
                    UnaryOp::Neg => {
                        require(ty, Ty::Num, "unary -")?;
                        (CExpr::Unary(UnaryOp::Neg, Box::new(ci)), Ty::Num)
                    }
                    UnaryOp::Not => {
                        require(ty, Ty::Bool, "unary !")?;
                        (CExpr::Unary(UnaryOp::Not, Box::new(ci)), Ty::Bool)
                    }
                }
            }
            Expr::Binary(op, l, r) => {
                let (cl, tl) = self.compile_rec(l, resolve, allow_helpers)?;
                let (cr, tr) = self.compile_rec(r, resolve, allow_helpers)?;
                let (want, out) = match op {
                    Add | Sub | Mul | Div | Rem => (Ty::Num, Ty::Num),
                    Lt | Le | Gt | Ge | Eq | Ne => (Ty::Num, Ty::Bool),
                    And | Or => (Ty::Bool, Ty::Bool),
                };
                require(tl, want, &format!("left of {op:?}"))?;
                require(tr, want, &format!("right of {op:?}"))?;
                (CExpr::Binary(*op, Box::new(cl), Box::new(cr)), out)
            }
            Expr::Call(name, args) => {
                let mut cargs = Vec::with_capacity(args.len());
                for a in args {
                    let (ca, ty) = self.compile_rec(a, resolve, allow_helpers)?;
                    require(ty, Ty::Num, "function argument")?;
                    cargs.push(ca);
                }
                if let Some(b) = Builtin::lookup(name) {
                    if cargs.len() != b.arity() {
                        return Err(format!("{name} expects {} args, got {}", b.arity(), cargs.len()));
                    }
                    (CExpr::Builtin(b, cargs), Ty::Num)
                } else if !allow_helpers && self.graph.helpers.iter().any(|h| &h.name == name) {
                    return Err(format!("helper bodies may not call other helpers ({name:?})"));
                } else if let Some(i) = self.helper_sigs.iter().position(|(n, _)| n == name) {
                    let want = self.helper_sigs[i].1;
                    if cargs.len() != want {
                        return Err(format!("{name} expects {want} args, got {}", cargs.len()));
                    }
                    (CExpr::Helper(i as u32, cargs), Ty::Num)
                } else if self.graph.helpers.iter().any(|h| &h.name == name) {
                    return Err(format!("helper {name:?} referenced before its definition"));
                } else {
                    return Err(format!("unknown function {name:?}"));
                }
            }
        })
    }
}

fn require(got: Ty, want: Ty, what: &str) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!(
            "{what}: expected {}, got {}",
            if want == Ty::Num { "number" } else { "boolean" },
            if got == Ty::Num { "number" } else { "boolean" },
        ))
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Outcome of fetching one cluster from the data source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FetchInfo {
    pub bytes: u64,
    /// Modeled transfer duration (virtual time backends use it; wall-clock
    /// backends measure instead).
    pub duration_us: u64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FetchFailure {
    #[error("authorization failed for file {file} (token missing or invalid)")]
    Auth { file: u32 },
    #[error("io error fetching file {file} cluster {cluster}: {message}")]
    Io { file: u32, cluster: u32, message: String },
}

/// Fetches cluster payloads ahead of processing. Synthetic datasets never
/// call this.
pub trait ClusterFetcher {
    fn fetch(&mut self, file_idx: u32, cluster_idx: u32, cluster: &ClusterInfo)
        -> Result<FetchInfo, FetchFailure>;
}

/// No-op fetcher for purely local execution (oracles, tests).
pub struct NoFetch;

impl ClusterFetcher for NoFetch {
    fn fetch(&mut self, _f: u32, _c: u32, cluster: &ClusterInfo) -> Result<FetchInfo, FetchFailure> {
        Ok(FetchInfo { bytes: cluster.byte_size, duration_us: 0 })
    }
}

/// Observer of the strict fetch/process alternation the executor follows.
pub trait PhaseSink {
    fn fetch_started(&mut self) {}
    fn fetch_finished(&mut self, _info: &FetchInfo) {}
    fn process_started(&mut self, _entries: u64) {}
    fn process_finished(&mut self, _entries: u64) {}
}

/// Sink that ignores all phases.
pub struct NoSink;

impl PhaseSink for NoSink {}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExecError {
    #[error(transparent)]
    Fetch(#[from] FetchFailure),
    #[error("evaluation failed at entry {entry}: {message}")]
    Eval { entry: u64, message: String },
    #[error("range references unknown cluster (file {file}, cluster {cluster})")]
    BadRange { file: u32, cluster: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExecOptions {
    /// Surface NaN from defines/filters/actions as an error instead of
    /// letting it propagate.
    pub strict_nan: bool,
}

/// Execute the graph over one entry range: a single pass in ascending global
/// entry order, cluster by cluster, strictly alternating fetch and process
/// phases. Returns one accumulator per action id.
pub fn execute_graph(
    cg: &CompiledGraph,
    d: &DatasetDescriptor,
    range: &EntryRange,
    source: &dyn ValueSource,
    fetcher: &mut dyn ClusterFetcher,
    sink: &mut dyn PhaseSink,
    opts: ExecOptions,
) -> Result<PartialResult, ExecError> {
    let mut accs: Vec<Accumulator> = cg.actions.iter().map(|(_, t, _)| t.clone()).collect();
    let offsets = d.file_entry_offsets();
    let remote = d.kind == crate::dataset::DatasetKind::SimulatedRemote;
    let mut row = vec![0.0f64; cg.nslots];

    for &(fi, ci) in &range.cluster_ids {
        let file = d
            .files
            .get(fi as usize)
            .ok_or(ExecError::BadRange { file: fi, cluster: ci })?;
        let cluster = *file
            .clusters
            .get(ci as usize)
            .ok_or(ExecError::BadRange { file: fi, cluster: ci })?;

        if remote {
            sink.fetch_started();
            let info = fetcher.fetch(fi, ci, &cluster)?;
            sink.fetch_finished(&info);
        }

        let gbegin = offsets[fi as usize] + cluster.first_entry;
        let gend = offsets[fi as usize] + cluster.last_entry;
        let entries = gend - gbegin;
        sink.process_started(entries);
        for entry in gbegin..gend {
            for c in 0..cg.ncols {
                row[c] = source.value(c, entry);
            }
            walk(cg, &cg.roots, &mut row, &mut accs, entry, opts)?;
        }
        sink.process_finished(entries);
    }

    let actions = cg
        .actions
        .iter()
        .enumerate()
        .map(|(i, (id, _, _))| (*id, accs[i].clone()))
        .collect();
    Ok(PartialResult { actions })
}

fn walk(
    cg: &CompiledGraph,
    nodes: &[usize],
    row: &mut Vec<f64>,
    accs: &mut [Accumulator],
    entry: u64,
    opts: ExecOptions,
) -> Result<(), ExecError> {
    for &ni in nodes {
        let node = &cg.nodes[ni];
        match &node.kind {
            CNodeKind::Define { slot, expr } => {
                let v = eval_c(expr, row, &[], &cg.helpers);
                if opts.strict_nan && v.is_nan() {
                    return Err(ExecError::Eval { entry, message: "define produced NaN".into() });
                }
                row[*slot as usize] = v;
                walk(cg, &node.children, row, accs, entry, opts)?;
            }
            CNodeKind::Filter { expr } => {
                // Booleans are 1.0/0.0 in compiled form; prune on false.
                if eval_c(expr, row, &[], &cg.helpers) != 0.0 {
                    walk(cg, &node.children, row, accs, entry, opts)?;
                }
            }
            CNodeKind::Action { acc_idx } => {
                let (_, _, slot) = cg.actions[*acc_idx];
                let value = row[slot as usize];
                if opts.strict_nan && value.is_nan() {
                    return Err(ExecError::Eval { entry, message: "action input is NaN".into() });
                }
                accs[*acc_idx].feed(value);
            }
        }
    }
    Ok(())
}

/// Compiled-expression evaluator. Booleans are represented as 1.0/0.0; the
/// typechecker guarantees the two domains never mix.
fn eval_c(e: &CExpr, row: &[f64], params: &[f64], helpers: &[CHelper]) -> f64 {
    use crate::expr::BinaryOp::*;
    match e {
        CExpr::Const(n) => *n,
        CExpr::Slot(s) => row[*s as usize],
        CExpr::Param(p) => params[*p as usize],
        CExpr::Unary(op, inner) => {
            let v = eval_c(inner, row, params, helpers);
            match op {
                UnaryOp::Neg => -v,
                UnaryOp::Not => {
                    if v == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        }
        CExpr::Binary(op, l, r) => {
            match op {
                And => {
                    if eval_c(l, row, params, helpers) == 0.0 {
                        return 0.0;
                    }
                    eval_c(r, row, params, helpers)
                }
                Or => {
                    if eval_c(l, row, params, helpers) != 0.0 {
                        return 1.0;
                    }
                    eval_c(r, row, params, helpers)
                }
                _ => {
                    let a = eval_c(l, row, params, helpers);
                    let b = eval_c(r, row, params, helpers);
                    match op {
                        Add => a + b,
                        Sub => a - b,
                        Mul => a * b,
                        Div => a / b,
                        Rem => a % b,
                        Lt => f64::from(a < b),
                        Le => f64::from(a <= b),
                        Gt => f64::from(a > b),
                        Ge => f64::from(a >= b),
                        Eq => f64::from(a == b),
                        Ne => f64::from(a != b),
                        And | Or => unreachable!(),
                    }
                }
            }
        }
        CExpr::Builtin(b, args) => match args.len() {
            1 => b.apply(&[eval_c(&args[0], row, params, helpers)]),
            _ => b.apply(&[
                eval_c(&args[0], row, params, helpers),
                eval_c(&args[1], row, params, helpers),
            ]),
        },
        CExpr::Helper(h, args) => {
            let helper = &helpers[*h as usize];
            let mut frame = [0.0f64; 8];
            debug_assert!(helper.nparams <= 8, "helper arity capped at 8");
            for (i, a) in args.iter().enumerate() {
                frame[i] = eval_c(a, row, params, helpers);
            }
            eval_c(&helper.body, row, &frame[..helper.nparams], helpers)
        }
    }
}

impl fmt::Display for ComputationGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{uniform_dataset, DatasetKind, SynthSource};
    use crate::planner::build_plan;

    fn dataset(entries: u64, span: u64) -> DatasetDescriptor {
        uniform_dataset("g", DatasetKind::Synthetic, 11, &["c0", "c1", "c2"], 1, entries, span, 512, false)
    }

    fn full_range(d: &DatasetDescriptor) -> EntryRange {
        build_plan(d, 1).unwrap().ranges.remove(0)
    }

    /// Test-only source: every column value equals the global entry index.
    struct EntryIndexSource;

    impl ValueSource for EntryIndexSource {
        fn value(&self, _c: usize, e: u64) -> f64 {
            e as f64
        }
    }

    fn run(
        text: &str,
        d: &DatasetDescriptor,
        source: &dyn ValueSource,
    ) -> PartialResult {
        let g = ComputationGraph::parse(text).unwrap();
        let cg = g.typecheck(d).unwrap();
        let r = full_range(d);
        execute_graph(&cg, d, &r, source, &mut NoFetch, &mut NoSink, ExecOptions::default()).unwrap()
    }

    #[test]
    fn count_without_filter_counts_all() {
        let d = dataset(1000, 100);
        let res = run("count 0;", &d, &SynthSource::for_dataset(&d));
        assert_eq!(res.actions[&0], Accumulator::Count { n: 1000 });
    }

    #[test]
    fn mean_of_injected_entry_index_values() {
        let d = dataset(1000, 100);
        let res = run("mean 0 c0;", &d, &EntryIndexSource);
        assert_eq!(res.finalize()[&0], crate::result::FinalValue::Mean(499.5));
    }

    #[test]
    fn filtered_count_matches_sequential_oracle() {
        let d = dataset(10_000, 512);
        let src = SynthSource::for_dataset(&d);
        let res = run("filter c0 < 0.5; count 0;", &d, &src);
        let expected = (0..10_000u64)
            .filter(|&e| crate::dataset::synth_value(11, 0, e) < 0.5)
            .count() as u64;
        assert_eq!(res.actions[&0], Accumulator::Count { n: expected });
    }

    #[test]
    fn define_then_mean_typechecks_and_runs() {
        let d = dataset(100, 10);
        let res = run("define s = c0 + c1; mean 0 s;", &d, &EntryIndexSource);
        // s = 2*entry, mean over 0..100 = 99.
        assert_eq!(res.finalize()[&0], crate::result::FinalValue::Mean(99.0));
    }

    #[test]
    fn helper_used_from_filter() {
        let d = dataset(100, 10);
        let text = "def half(a) = a / 2.0;\nfilter half(c0) < 25; count 0;";
        let res = run(text, &d, &EntryIndexSource);
        assert_eq!(res.actions[&0], Accumulator::Count { n: 50 });
    }

    #[test]
    fn branching_graph_with_explicit_nodes() {
        let d = dataset(100, 10);
        let text = "filter c0 < 50; count 0;\nnode 9 parent root: count 1;";
        let res = run(text, &d, &EntryIndexSource);
        assert_eq!(res.actions[&0], Accumulator::Count { n: 50 });
        assert_eq!(res.actions[&1], Accumulator::Count { n: 100 });
    }

    #[test]
    fn typecheck_rejects_numeric_filter() {
        let d = dataset(10, 10);
        let g = ComputationGraph::parse("filter c0 + 1; count 0;").unwrap();
        let e = g.typecheck(&d).unwrap_err();
        assert!(e.message.contains("boolean"), "{e}");
    }

    #[test]
    fn typecheck_accepts_mean_on_defined_column() {
        let d = dataset(10, 10);
        let g = ComputationGraph::parse("define twice = c0 * 2; mean 0 twice;").unwrap();
        assert!(g.typecheck(&d).is_ok());
    }

    #[test]
    fn typecheck_rejects_degenerate_histogram() {
        let d = dataset(10, 10);
        let g = ComputationGraph::parse("histo1d 0 c0 10 1 1;").unwrap();
        let e = g.typecheck(&d).unwrap_err();
        assert!(e.message.contains("lo < hi"), "{e}");
    }

    #[test]
    fn typecheck_rejects_unknown_column() {
        let d = dataset(10, 10);
        let g = ComputationGraph::parse("mean 0 nope;").unwrap();
        assert!(g.typecheck(&d).is_err());
    }

    #[test]
    fn typecheck_rejects_unknown_function() {
        let d = dataset(10, 10);
        let g = ComputationGraph::parse("filter sq(c0) < 1; count 0;").unwrap();
        let e = g.typecheck(&d).unwrap_err();
        assert!(e.message.contains("unknown function"), "{e}");
    }

    #[test]
    fn typecheck_rejects_action_with_child() {
        let d = dataset(10, 10);
        let text = "count 0;\nnode 5 parent 0: count 1;";
        let g = ComputationGraph::parse(text).unwrap();
        let e = g.typecheck(&d).unwrap_err();
        assert!(e.message.contains("leaves"), "{e}");
    }

    #[test]
    fn typecheck_rejects_shadowing_define() {
        let d = dataset(10, 10);
        let g = ComputationGraph::parse("define c0 = c1; count 0;").unwrap();
        let e = g.typecheck(&d).unwrap_err();
        assert!(e.message.contains("shadows"), "{e}");
    }

    #[test]
    fn defines_on_sibling_branches_do_not_collide() {
        let d = dataset(10, 10);
        let text = "\
            node 0 parent root: define a = c0 + 1;\n\
            node 1 parent 0: mean 10 a;\n\
            node 2 parent root: define a = c0 + 2;\n\
            node 3 parent 2: mean 11 a;\n";
        let g = ComputationGraph::parse(text).unwrap();
        let cg = g.typecheck(&d).unwrap();
        let r = full_range(&d);
        let res = execute_graph(&cg, &d, &r, &EntryIndexSource, &mut NoFetch, &mut NoSink, ExecOptions::default())
            .unwrap();
        // Entries 0..10: mean(e)=4.5, so a=+1 -> 5.5 and a=+2 -> 6.5.
        assert_eq!(res.finalize()[&10], crate::result::FinalValue::Mean(5.5));
        assert_eq!(res.finalize()[&11], crate::result::FinalValue::Mean(6.5));
    }

    #[test]
    fn per_range_merge_equals_full_run() {
        let d = dataset(5_000, 250);
        let src = SynthSource::for_dataset(&d);
        let text = "define m = sqrt(c0*c0 + c1*c1);\nfilter m < 0.9;\ncount 0; mean 1 m; histo1d 2 m 20 0 1.5; sum 3 c2;";
        let g = ComputationGraph::parse(text).unwrap();
        let cg = g.typecheck(&d).unwrap();

        let full = execute_graph(&cg, &d, &full_range(&d), &src, &mut NoFetch, &mut NoSink, ExecOptions::default())
            .unwrap();

        let plan = build_plan(&d, 7).unwrap();
        let mut merged: Option<PartialResult> = None;
        for r in &plan.ranges {
            let part =
                execute_graph(&cg, &d, r, &src, &mut NoFetch, &mut NoSink, ExecOptions::default()).unwrap();
            match merged.as_mut() {
                Some(m) => m.merge(&part).unwrap(),
                None => merged = Some(part),
            }
        }
        let merged = merged.unwrap();

        // Counts and bins exact; floating aggregates within 1e-12 relative.
        assert_eq!(merged.actions[&0], full.actions[&0]);
        assert_eq!(merged.actions[&2], full.actions[&2]);
        for id in [1u32, 3] {
            let a = match &merged.actions[&id] {
                Accumulator::Mean { sum, .. } | Accumulator::Sum { sum } => *sum,
                other => panic!("unexpected {other:?}"),
            };
            let b = match &full.actions[&id] {
                Accumulator::Mean { sum, .. } | Accumulator::Sum { sum } => *sum,
                other => panic!("unexpected {other:?}"),
            };
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "action {id}: {a} vs {b}");
        }
    }

    #[test]
    fn text_round_trip_linear_and_branching() {
        for text in [
            "def sq(a) = a * a;\ndefine m = sq(c0);\nfilter m < 0.5;\ncount 0;\nmean 1 m;\n",
            "node 0 parent root: filter c0 < 0.5;\nnode 1 parent 0: count 0;\nnode 2 parent root: count 1;\n",
        ] {
            let g = ComputationGraph::parse(text).unwrap();
            let printed = g.to_text();
            let back = ComputationGraph::parse(&printed).unwrap();
            assert_eq!(back.nodes, g.nodes);
            assert_eq!(back.helpers, g.helpers);
        }
    }

    #[test]
    fn helpers_may_not_call_helpers() {
        let d = dataset(10, 10);
        let text = "def a(x) = x + 1;\ndef b(x) = a(x) * 2;\nfilter b(c0) < 3; count 0;";
        let g = ComputationGraph::parse(text).unwrap();
        let e = g.typecheck(&d).unwrap_err();
        assert!(e.message.contains("may not call"), "{e}");
    }
}
