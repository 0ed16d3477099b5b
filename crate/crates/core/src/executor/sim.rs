//! Deterministic rule-based kernel.
//!
//! Understands a tiny line-oriented subset of Python: literals, variables,
//! `+ - * /`, `print`, assignment, `raise`, and a few effect functions
//! (`sleep`, `warn`, `save_figure`, `write_file`, `read_file`). `def` blocks
//! are skipped. Other lines raise `SyntaxError`. Calls to tool names are
//! routed to the session's [`ToolHost`].

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::{watch, Mutex};
use tokio::time::Instant;

use super::{
    classify_feedback, push_output, BackendKind, ExecError, ExecResult, Kernel, KernelInfo, ToolHost,
    INTERRUPTED_ERROR, TIMEOUT_ERROR,
};
use crate::cell::{Cell, CellOutput};

/// A 1x1 white PNG written for every saved figure.
pub const TINY_PNG: [u8; 69] = [
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52, 0x00, 0x00,
    0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x02, 0x00, 0x00, 0x00, 0x90, 0x77, 0x53, 0xde, 0x00, 0x00, 0x00,
    0x0c, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xf8, 0xff, 0xff, 0x3f, 0x00, 0x05, 0xfe, 0x02, 0xfe, 0x0d,
    0xef, 0x46, 0xb8, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Artificial latency added to every executed cell.
    #[serde(default)]
    pub cell_latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Val {
    None,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Val {
    fn display(&self) -> String {
        match self {
            Val::None => "None".into(),
            Val::Bool(b) => if *b { "True" } else { "False" }.into(),
            Val::Int(i) => i.to_string(),
            Val::Float(f) => {
                if f.is_finite() && f.fract() == 0.0 && f.abs() < 1e16 {
                    format!("{f:.1}")
                } else {
                    f.to_string()
                }
            }
            Val::Str(s) => s.clone(),
        }
    }

    fn repr(&self) -> String {
        match self {
            Val::Str(s) => format!("'{}'", s.replace('\\', "\\\\").replace('\'', "\\'").replace('\n', "\\n")),
            other => other.display(),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            Val::None => "NoneType",
            Val::Bool(_) => "bool",
            Val::Int(_) => "int",
            Val::Float(_) => "float",
            Val::Str(_) => "str",
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Val::None => Value::Null,
            Val::Bool(b) => Value::Bool(*b),
            Val::Int(i) => Value::from(*i),
            Val::Float(f) => serde_json::Number::from_f64(*f).map(Value::Number).unwrap_or(Value::Null),
            Val::Str(s) => Value::String(s.clone()),
        }
    }

    fn from_json(v: &Value) -> Val {
        match v {
            Value::Null => Val::None,
            Value::Bool(b) => Val::Bool(*b),
            Value::Number(n) => n.as_i64().map(Val::Int).unwrap_or_else(|| Val::Float(n.as_f64().unwrap_or(0.0))),
            Value::String(s) => Val::Str(s.clone()),
            other => Val::Str(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Lit(Val),
    Name(String),
    Neg(Box<Expr>),
    Bin(Box<Expr>, char, Box<Expr>),
    Call(String, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
enum Stmt {
    Nop,
    Assign(String, Expr),
    Expr(Expr),
    Raise(String, Option<Expr>),
    LoopForever,
}

/// Why a cell stopped early.
#[derive(Debug, Clone, PartialEq)]
enum Raise {
    Exception(String, String),
    Stop(&'static str),
}

fn exc(name: &str, value: impl Into<String>) -> Raise {
    Raise::Exception(name.to_string(), value.into())
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(String),
    Str(String),
    Ident(String),
    Op(char),
}

fn tokenize(s: &str) -> Result<Vec<Tok>, String> {
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '#' {
            break;
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.' || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Num(chars[start..i].iter().filter(|c| **c != '_').collect()));
        } else if c == '"' || c == '\'' {
            let quote = c;
            i += 1;
            let mut text = String::new();
            loop {
                let Some(&ch) = chars.get(i) else {
                    return Err("unterminated string literal".into());
                };
                i += 1;
                if ch == quote {
                    break;
                }
                if ch == '\\' {
                    let Some(&esc) = chars.get(i) else {
                        return Err("unterminated string literal".into());
                    };
                    i += 1;
                    text.push(match esc {
                        'n' => '\n',
                        't' => '\t',
                        other => other,
                    });
                } else {
                    text.push(ch);
                }
            }
            out.push(Tok::Str(text));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/(),=:".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(format!("invalid character '{c}'"));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, String> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            lhs = Expr::Bin(Box::new(lhs), op, Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, String> {
        let mut lhs = self.factor()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            lhs = Expr::Bin(Box::new(lhs), op, Box::new(self.factor()?));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, String> {
        match self.next() {
            Some(Tok::Num(n)) => {
                if n.contains('.') {
                    n.parse().map(|f| Expr::Lit(Val::Float(f))).map_err(|_| "invalid number".into())
                } else {
                    n.parse().map(|i| Expr::Lit(Val::Int(i))).map_err(|_| "invalid number".into())
                }
            }
            Some(Tok::Str(s)) => Ok(Expr::Lit(Val::Str(s))),
            Some(Tok::Op('-')) => Ok(Expr::Neg(Box::new(self.factor()?))),
            Some(Tok::Op('(')) => {
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err("expected ')'".into());
                }
                Ok(e)
            }
            Some(Tok::Ident(name)) => match name.as_str() {
                "None" => Ok(Expr::Lit(Val::None)),
                "True" => Ok(Expr::Lit(Val::Bool(true))),
                "False" => Ok(Expr::Lit(Val::Bool(false))),
                _ if self.eat('(') => {
                    let mut args = Vec::new();
                    if !self.eat(')') {
                        loop {
                            args.push(self.expr()?);
                            if self.eat(')') {
                                break;
                            }
                            if !self.eat(',') {
                                return Err("expected ',' or ')'".into());
                            }
                        }
                    }
                    Ok(Expr::Call(name, args))
                }
                _ => Ok(Expr::Name(name)),
            },
            _ => Err("invalid syntax".into()),
        }
    }
}

fn parse_expr_str(s: &str) -> Result<Expr, String> {
    let mut p = Parser {
        toks: tokenize(s)?,
        pos: 0,
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err("invalid syntax".into());
    }
    Ok(e)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_alphabetic() || c == '_') && chars.all(|c| c.is_alphanumeric() || c == '_')
}

fn parse_stmt(line: &str) -> Result<Stmt, String> {
    let t = line.trim();
    if t.is_empty() || t.starts_with('#') || t == "pass" || t.starts_with("import ") || t.starts_with("from ") {
        return Ok(Stmt::Nop);
    }
    let compact: String = t.chars().filter(|c| !c.is_whitespace()).collect();
    if compact == "whileTrue:pass" || compact == "loop_forever()" {
        return Ok(Stmt::LoopForever);
    }
    if let Some(rest) = t.strip_prefix("raise ") {
        let rest = rest.trim();
        return match rest.find('(') {
            Some(open) if rest.ends_with(')') => {
                let name = rest[..open].trim().to_string();
                let inner = &rest[open + 1..rest.len() - 1];
                let arg = if inner.trim().is_empty() { None } else { Some(parse_expr_str(inner)?) };
                Ok(Stmt::Raise(name, arg))
            }
            None if is_ident(rest) => Ok(Stmt::Raise(rest.to_string(), None)),
            _ => Err("invalid syntax".into()),
        };
    }
    if let Some(eq) = t.find('=') {
        let (lhs, rhs) = (t[..eq].trim(), &t[eq + 1..]);
        if is_ident(lhs) && !rhs.starts_with('=') {
            return Ok(Stmt::Assign(lhs.to_string(), parse_expr_str(rhs)?));
        }
    }
    Ok(Stmt::Expr(parse_expr_str(t)?))
}

// ---------------------------------------------------------------------------
// Evaluation

/// Execution context for one action.
pub struct SimCtx {
    pub deadline: Instant,
    pub interrupt: watch::Receiver<u64>,
    pub tools: Option<Arc<dyn ToolHost>>,
}

impl SimCtx {
    async fn block(&mut self, dur: Option<Duration>) -> Result<(), Raise> {
        let sleep = async {
            match dur {
                Some(d) => tokio::time::sleep(d).await,
                None => std::future::pending::<()>().await,
            }
        };
        tokio::select! {
            _ = sleep => Ok(()),
            _ = self.interrupt.changed() => Err(Raise::Stop(INTERRUPTED_ERROR)),
            _ = tokio::time::sleep_until(self.deadline) => Err(Raise::Stop(TIMEOUT_ERROR)),
        }
    }
}

type EvalFuture<'a> = Pin<Box<dyn Future<Output = Result<Val, Raise>> + Send + 'a>>;

/// Interpreter state of one simulated kernel.
pub struct SimInterpreter {
    vars: HashMap<String, Val>,
    workdir: PathBuf,
}

struct CellRun<'a> {
    cell_id: &'a str,
    outputs: Vec<CellOutput>,
    figures: usize,
}

impl SimInterpreter {
    pub fn new(workdir: &Path) -> Self {
        Self {
            vars: HashMap::new(),
            workdir: workdir.to_path_buf(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Val> {
        self.vars.get(name)
    }

    /// Runs one cell. An error, interrupt or timeout ends the cell with an
    /// error-channel output.
    pub async fn run_cell(&mut self, cell_id: &str, code: &str, ctx: &mut SimCtx) -> Vec<CellOutput> {
        let mut run = CellRun {
            cell_id,
            outputs: Vec::new(),
            figures: 0,
        };
        let lines: Vec<&str> = code.lines().collect();
        let last_stmt = lines.iter().rposition(|l| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        });
        let mut in_def = false;
        for (n, line) in lines.iter().enumerate() {
            // Function definitions are accepted and ignored.
            if in_def && (line.starts_with(' ') || line.starts_with('\t') || line.trim().is_empty()) {
                continue;
            }
            in_def = line.starts_with("def ");
            if in_def {
                continue;
            }
            let result = match parse_stmt(line) {
                Ok(stmt) => self.exec_stmt(&stmt, Some(n) == last_stmt, &mut run, ctx).await,
                Err(msg) => Err(exc("SyntaxError", msg)),
            };
            if let Err(raise) = result {
                let (name, value) = match raise {
                    Raise::Exception(n, v) => (n, v),
                    Raise::Stop(kind) => (kind.to_string(), format!("execution stopped ({})", kind.to_lowercase())),
                };
                let tb = vec![
                    format!("  File \"<{cell_id}>\", line {}", n + 1),
                    format!("    {}", line.trim()),
                    format!("{name}: {value}"),
                ];
                run.outputs.push(CellOutput::error(name, value, tb));
                break;
            }
        }
        run.outputs
    }

    async fn exec_stmt(&mut self, stmt: &Stmt, is_last: bool, run: &mut CellRun<'_>, ctx: &mut SimCtx) -> Result<(), Raise> {
        match stmt {
            Stmt::Nop => Ok(()),
            Stmt::LoopForever => ctx.block(None).await,
            Stmt::Raise(name, arg) => {
                let value = match arg {
                    Some(e) => self.eval(e, run, ctx).await?.display(),
                    None => String::new(),
                };
                Err(exc(name, value))
            }
            Stmt::Assign(name, e) => {
                let v = self.eval(e, run, ctx).await?;
                self.vars.insert(name.clone(), v);
                Ok(())
            }
            Stmt::Expr(e) => {
                let v = self.eval(e, run, ctx).await?;
                if is_last && v != Val::None {
                    run.outputs.push(CellOutput::rich("text/plain", v.repr(), None));
                }
                Ok(())
            }
        }
    }

    fn eval<'a>(&'a mut self, e: &'a Expr, run: &'a mut CellRun<'_>, ctx: &'a mut SimCtx) -> EvalFuture<'a> {
        Box::pin(async move {
            match e {
                Expr::Lit(v) => Ok(v.clone()),
                Expr::Name(n) => self
                    .vars
                    .get(n)
                    .cloned()
                    .ok_or_else(|| exc("NameError", format!("name '{n}' is not defined"))),
                Expr::Neg(inner) => match self.eval(inner, run, ctx).await? {
                    Val::Int(i) => Ok(Val::Int(-i)),
                    Val::Float(f) => Ok(Val::Float(-f)),
                    v => Err(exc("TypeError", format!("bad operand type for unary -: '{}'", v.type_name()))),
                },
                Expr::Bin(l, op, r) => {
                    let a = self.eval(l, run, ctx).await?;
                    let b = self.eval(r, run, ctx).await?;
                    binop(&a, *op, &b)
                }
                Expr::Call(name, args) => {
                    let mut vals = Vec::with_capacity(args.len());
                    for a in args {
                        vals.push(self.eval(a, run, ctx).await?);
                    }
                    self.call(name, vals, run, ctx).await
                }
            }
        })
    }

    async fn call(&mut self, name: &str, args: Vec<Val>, run: &mut CellRun<'_>, ctx: &mut SimCtx) -> Result<Val, Raise> {
        let str_arg = |i: usize| match args.get(i) {
            Some(Val::Str(s)) => Ok(s.clone()),
            Some(v) => Err(exc("TypeError", format!("expected str, got {}", v.type_name()))),
            None => Err(exc("TypeError", format!("{name}() missing argument {}", i + 1))),
        };
        match name {
            "print" => {
                let line: Vec<String> = args.iter().map(Val::display).collect();
                push_output(&mut run.outputs, CellOutput::stdout(format!("{}\n", line.join(" "))));
                Ok(Val::None)
            }
            "warn" | "warnings.warn" => {
                push_output(&mut run.outputs, CellOutput::stderr(format!("UserWarning: {}\n", str_arg(0)?)));
                Ok(Val::None)
            }
            "sleep" | "time.sleep" => {
                let secs = match args.first() {
                    Some(Val::Int(i)) => *i as f64,
                    Some(Val::Float(f)) => *f,
                    _ => return Err(exc("TypeError", "sleep() expects a number")),
                };
                ctx.block(Some(Duration::from_secs_f64(secs.max(0.0)))).await?;
                Ok(Val::None)
            }
            "str" => Ok(Val::Str(args.first().map(Val::display).unwrap_or_default())),
            "len" => match args.first() {
                Some(Val::Str(s)) => Ok(Val::Int(s.chars().count() as i64)),
                Some(v) => Err(exc("TypeError", format!("object of type '{}' has no len()", v.type_name()))),
                None => Err(exc("TypeError", "len() takes exactly one argument")),
            },
            "save_figure" | "plt.savefig" | "plt.show" => {
                run.figures += 1;
                let rel = format!("outputs/{}-{}.png", run.cell_id, run.figures);
                let full = self.workdir.join(&rel);
                write_file(&full, &TINY_PNG)?;
                run.outputs.push(CellOutput::rich("image/png", "<Figure>", Some(rel)));
                Ok(Val::None)
            }
            "write_file" => {
                let path = str_arg(0)?;
                let content = args.get(1).map(Val::display).unwrap_or_default();
                write_file(&self.workdir.join(&path), content.as_bytes())?;
                Ok(Val::None)
            }
            "read_file" => {
                let path = str_arg(0)?;
                std::fs::read_to_string(self.workdir.join(&path))
                    .map(Val::Str)
                    .map_err(|_| exc("FileNotFoundError", format!("No such file or directory: '{path}'")))
            }
            _ => {
                if let Some(tools) = ctx.tools.clone() {
                    if tools.tool_names().iter().any(|t| t == name) {
                        let json_args = Value::Array(args.iter().map(Val::to_json).collect());
                        return match tools.call(name, json_args).await {
                            Ok(v) => Ok(Val::from_json(&v)),
                            Err(e) => Err(exc(&e.ename, e.evalue)),
                        };
                    }
                }
                Err(exc("NameError", format!("name '{name}' is not defined")))
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Raise> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| exc("OSError", e.to_string()))?;
    }
    std::fs::write(path, bytes).map_err(|e| exc("OSError", e.to_string()))
}

fn binop(a: &Val, op: char, b: &Val) -> Result<Val, Raise> {
    use Val::*;
    let float = |v: &Val| match v {
        Int(i) => Some(*i as f64),
        Float(f) => Some(*f),
        Bool(b) => Some(f64::from(u8::from(*b))),
        _ => Option::None,
    };
    match (a, op, b) {
        (Str(x), '+', Str(y)) => Ok(Str(format!("{x}{y}"))),
        (Str(x), '*', Int(n)) | (Int(n), '*', Str(x)) => Ok(Str(x.repeat((*n).max(0) as usize))),
        (_, '/', _) if float(b) == Some(0.0) => Err(exc("ZeroDivisionError", "division by zero")),
        (Int(x), '+', Int(y)) => x.checked_add(*y).map(Int).ok_or_else(|| exc("OverflowError", "integer overflow")),
        (Int(x), '-', Int(y)) => x.checked_sub(*y).map(Int).ok_or_else(|| exc("OverflowError", "integer overflow")),
        (Int(x), '*', Int(y)) => x.checked_mul(*y).map(Int).ok_or_else(|| exc("OverflowError", "integer overflow")),
        _ => match (float(a), float(b)) {
            (Some(x), Some(y)) => Ok(Float(match op {
                '+' => x + y,
                '-' => x - y,
                '*' => x * y,
                _ => x / y,
            })),
            _ => Err(exc(
                "TypeError",
                format!("unsupported operand type(s) for {op}: '{}' and '{}'", a.type_name(), b.type_name()),
            )),
        },
    }
}

// ---------------------------------------------------------------------------
// Kernel

pub struct SimKernel {
    info: KernelInfo,
    config: SimConfig,
    interp: Mutex<SimInterpreter>,
    interrupt_tx: watch::Sender<u64>,
    busy: AtomicBool,
    alive: AtomicBool,
    wall_ms: AtomicU64,
}

impl SimKernel {
    pub fn start(config: &SimConfig, workdir: &Path) -> Result<Self, ExecError> {
        let (interrupt_tx, _) = watch::channel(0);
        Ok(Self {
            info: KernelInfo {
                backend: BackendKind::Sim,
                session_id: uuid::Uuid::new_v4().to_string(),
                workdir: workdir.to_path_buf(),
            },
            config: config.clone(),
            interp: Mutex::new(SimInterpreter::new(workdir)),
            interrupt_tx,
            busy: AtomicBool::new(false),
            alive: AtomicBool::new(true),
            wall_ms: AtomicU64::new(0),
        })
    }
}

#[async_trait]
impl Kernel for SimKernel {
    fn info(&self) -> &KernelInfo {
        &self.info
    }

    async fn execute_cells(
        &self,
        cells: &[Cell],
        timeout: Duration,
        tools: Option<Arc<dyn ToolHost>>,
    ) -> Result<ExecResult, ExecError> {
        if !self.is_alive() {
            return Err(ExecError::KernelDead);
        }
        let mut interp = self.interp.lock().await;
        let mut rx = self.interrupt_tx.subscribe();
        rx.borrow_and_update();
        self.busy.store(true, Ordering::SeqCst);
        let start = Instant::now();
        let mut ctx = SimCtx {
            deadline: start + timeout,
            interrupt: rx,
            tools,
        };
        let mut outputs = vec![Vec::new(); cells.len()];
        let mut aborted = None;
        for (i, cell) in cells.iter().enumerate() {
            if !cell.is_code() {
                continue;
            }
            if self.config.cell_latency_ms > 0 {
                let _ = ctx.block(Some(Duration::from_millis(self.config.cell_latency_ms))).await;
            }
            outputs[i] = interp.run_cell(cell.id.as_str(), &cell.source, &mut ctx).await;
            if outputs[i].iter().any(CellOutput::is_error) {
                aborted = Some(i);
                break;
            }
        }
        self.busy.store(false, Ordering::SeqCst);
        let elapsed = start.elapsed();
        self.wall_ms.fetch_add(elapsed.as_millis() as u64, Ordering::SeqCst);
        let feedback = classify_feedback(&outputs, cells, None);
        Ok(ExecResult {
            outputs,
            feedback,
            elapsed_ms: elapsed.as_millis() as u64,
            aborted_at_cell: aborted,
        })
    }

    async fn interrupt(&self) -> Result<bool, ExecError> {
        if !self.is_alive() {
            return Err(ExecError::KernelDead);
        }
        if !self.busy.load(Ordering::SeqCst) {
            return Ok(false);
        }
        self.interrupt_tx.send_modify(|g| *g += 1);
        Ok(true)
    }

    async fn shutdown(&self) -> Result<(), ExecError> {
        self.alive.store(false, Ordering::SeqCst);
        Ok(())
    }

    fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    fn wall_time(&self) -> Duration {
        Duration::from_millis(self.wall_ms.load(Ordering::SeqCst))
    }
}
