//! Adapter for the public benchmark's distribution: a pickled dict mapping
//! `(modulation_name, snr)` to a numpy float32 array of shape `[n, 2, 128]`.
//!
//! Only the subset of the pickle machine needed for that layout is
//! implemented: plain containers, strings/bytes, numbers, memo, and
//! `numpy.core.multiarray._reconstruct` / `numpy._core.numeric._frombuffer`
//! array reconstruction (for both Python 2 and Python 3 writers).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use super::{Dataset, DatasetManifest, IqFrame, ModulationClass, SignalExample, FRAME_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Value {
    None,
    Bool(bool),
    Int(i64),
    /// Parsed but unused by any reconstructor this reader supports.
    Float,
    Str(Rc<str>),
    Bytes(Rc<[u8]>),
    Tuple(Rc<Vec<Value>>),
    List(Vec<Value>),
    Dict(Vec<(Value, Value)>),
    Global(Rc<str>, Rc<str>),
    Object(Rc<RefCell<Object>>),
    Mark,
}

#[derive(Debug)]
struct Object {
    module: Rc<str>,
    name: Rc<str>,
    args: Value,
    state: Option<Value>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Ingestion(msg.into())
}

struct Machine<'a> {
    data: &'a [u8],
    pos: usize,
    stack: Vec<Value>,
    memo: BTreeMap<u32, Value>,
}

impl<'a> Machine<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| bad("pickle stream truncated"))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.data[self.pos..];
        let n = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("unterminated text opcode"))?;
        let line = self.take(n + 1)?;
        std::str::from_utf8(&line[..n]).map_err(|_| bad("non-UTF-8 text opcode"))
    }

    fn pop(&mut self) -> Result<Value> {
        self.stack.pop().ok_or_else(|| bad("pickle stack underflow"))
    }

    fn top(&mut self) -> Result<&mut Value> {
        self.stack.last_mut().ok_or_else(|| bad("pickle stack underflow"))
    }

    fn pop_mark(&mut self) -> Result<Vec<Value>> {
        let at = self
            .stack
            .iter()
            .rposition(|v| matches!(v, Value::Mark))
            .ok_or_else(|| bad("pickle MARK not found"))?;
        let items = self.stack.split_off(at + 1);
        self.stack.pop();
        Ok(items)
    }

    fn memo_get(&self, key: u32) -> Result<Value> {
        self.memo
            .get(&key)
            .cloned()
            .ok_or_else(|| bad(format!("pickle memo key {key} missing")))
    }

    fn memo_put(&mut self, key: u32) -> Result<()> {
        let v = self
            .stack
            .last()
            .cloned()
            .ok_or_else(|| bad("pickle stack underflow"))?;
        self.memo.insert(key, v);
        Ok(())
    }

    fn push_str(&mut self, bytes: &[u8]) -> Result<()> {
        let s = std::str::from_utf8(bytes).map_err(|_| bad("invalid UTF-8 in pickle string"))?;
        self.stack.push(Value::Str(s.into()));
        Ok(())
    }

    fn extend_list(&mut self, items: Vec<Value>) -> Result<()> {
        match self.top()? {
            Value::List(list) => {
                list.extend(items);
                Ok(())
            }
            _ => Err(bad("APPEND target is not a list")),
        }
    }

    fn extend_dict(&mut self, items: Vec<Value>) -> Result<()> {
        if items.len() % 2 != 0 {
            return Err(bad("odd number of SETITEMS operands"));
        }
        match self.top()? {
            Value::Dict(dict) => {
                let mut it = items.into_iter();
                while let (Some(k), Some(v)) = (it.next(), it.next()) {
                    dict.push((k, v));
                }
                Ok(())
            }
            _ => Err(bad("SETITEM target is not a dict")),
        }
    }

    fn reduce(&mut self, callable: Value, args: Value) -> Result<Value> {
        let (module, name) = match callable {
            Value::Global(m, n) => (m, n),
            other => return Err(bad(format!("cannot call {other:?}"))),
        };
        // Python 3 writers at protocol 2 encode bytes as _codecs.encode(str, "latin1").
        if &*module == "_codecs" && &*name == "encode" {
            if let Value::Tuple(t) = &args {
                if let Some(Value::Str(s)) = t.first() {
                    let bytes: Option<Vec<u8>> = s
                        .chars()
                        .map(|c| u8::try_from(u32::from(c)).ok())
                        .collect();
                    let bytes = bytes.ok_or_else(|| bad("non-latin1 char in encoded bytes"))?;
                    return Ok(Value::Bytes(bytes.into()));
                }
            }
            return Err(bad("unexpected _codecs.encode arguments"));
        }
        if matches!(&*module, "__builtin__" | "builtins") && &*name == "bytes" {
            return Ok(Value::Bytes(Rc::from(Vec::new())));
        }
        Ok(Value::Object(Rc::new(RefCell::new(Object {
            module,
            name,
            args,
            state: None,
        }))))
    }

    fn run(mut self) -> Result<Value> {
        loop {
            let op = self.u8()?;
            match op {
                0x80 => {
                    self.u8()?;
                }
                0x95 => {
                    self.u64()?;
                }
                b'.' => return self.pop(),
                b'(' => self.stack.push(Value::Mark),
                b'0' => {
                    self.pop()?;
                }
                b'1' => {
                    self.pop_mark()?;
                }
                b'2' => {
                    let v = self.top()?.clone();
                    self.stack.push(v);
                }
                b'N' => self.stack.push(Value::None),
                0x88 => self.stack.push(Value::Bool(true)),
                0x89 => self.stack.push(Value::Bool(false)),
                b'I' => {
                    let line = self.line()?;
                    let v = match line {
                        "01" => Value::Bool(true),
                        "00" => Value::Bool(false),
                        s => Value::Int(s.parse().map_err(|_| bad("bad INT literal"))?),
                    };
                    self.stack.push(v);
                }
                b'L' => {
                    let line = self.line()?.trim_end_matches('L');
                    let v = line.parse().map_err(|_| bad("bad LONG literal"))?;
                    self.stack.push(Value::Int(v));
                }
                b'J' => {
                    let v = self.u32()? as i32;
                    self.stack.push(Value::Int(v as i64));
                }
                b'K' => {
                    let v = self.u8()?;
                    self.stack.push(Value::Int(v as i64));
                }
                b'M' => {
                    let v = self.u16()?;
                    self.stack.push(Value::Int(v as i64));
                }
                0x8a => {
                    let n = self.u8()? as usize;
                    let b = self.take(n)?;
                    if n > 8 {
                        return Err(bad("LONG1 wider than 64 bits"));
                    }
                    let fill = if b.last().is_some_and(|&x| x & 0x80 != 0) { 0xff } else { 0 };
                    let mut buf = [fill; 8];
                    buf[..n].copy_from_slice(b);
                    self.stack.push(Value::Int(i64::from_le_bytes(buf)));
                }
                b'G' => {
                    self.take(8)?;
                    self.stack.push(Value::Float);
                }
                b'F' => {
                    let _: f64 = self.line()?.parse().map_err(|_| bad("bad FLOAT literal"))?;
                    self.stack.push(Value::Float);
                }
                b'U' => {
                    let n = self.u8()? as usize;
                    let b = self.take(n)?;
                    self.stack.push(Value::Bytes(b.into()));
                }
                b'T' => {
                    let n = self.u32()? as usize;
                    let b = self.take(n)?;
                    self.stack.push(Value::Bytes(b.into()));
                }
                b'C' => {
                    let n = self.u8()? as usize;
                    let b = self.take(n)?;
                    self.stack.push(Value::Bytes(b.into()));
                }
                b'B' => {
                    let n = self.u32()? as usize;
                    let b = self.take(n)?;
                    self.stack.push(Value::Bytes(b.into()));
                }
                0x8e | 0x96 => {
                    let n = self.u64()? as usize;
                    let b = self.take(n)?;
                    self.stack.push(Value::Bytes(b.into()));
                }
                0x8c => {
                    let n = self.u8()? as usize;
                    let b = self.take(n)?;
                    self.push_str(b)?;
                }
                b'X' => {
                    let n = self.u32()? as usize;
                    let b = self.take(n)?;
                    self.push_str(b)?;
                }
                0x8d => {
                    let n = self.u64()? as usize;
                    let b = self.take(n)?;
                    self.push_str(b)?;
                }
                b')' => self.stack.push(Value::Tuple(Rc::new(Vec::new()))),
                b't' => {
                    let items = self.pop_mark()?;
                    self.stack.push(Value::Tuple(Rc::new(items)));
                }
                0x85..=0x87 => {
                    let n = (op - 0x84) as usize;
                    if self.stack.len() < n {
                        return Err(bad("pickle stack underflow"));
                    }
                    let items = self.stack.split_off(self.stack.len() - n);
                    self.stack.push(Value::Tuple(Rc::new(items)));
                }
                b']' => self.stack.push(Value::List(Vec::new())),
                b'l' => {
                    let items = self.pop_mark()?;
                    self.stack.push(Value::List(items));
                }
                b'a' => {
                    let v = self.pop()?;
                    self.extend_list(vec![v])?;
                }
                b'e' => {
                    let items = self.pop_mark()?;
                    self.extend_list(items)?;
                }
                b'}' => self.stack.push(Value::Dict(Vec::new())),
                b'd' => {
                    let items = self.pop_mark()?;
                    self.stack.push(Value::Dict(Vec::new()));
                    self.extend_dict(items)?;
                }
                b's' => {
                    let v = self.pop()?;
                    let k = self.pop()?;
                    self.extend_dict(vec![k, v])?;
                }
                b'u' => {
                    let items = self.pop_mark()?;
                    self.extend_dict(items)?;
                }
                b'c' => {
                    let module = self.line()?;
                    let name = self.line()?;
                    self.stack.push(Value::Global(module.into(), name.into()));
                }
                0x93 => {
                    let name = self.pop()?;
                    let module = self.pop()?;
                    match (module, name) {
                        (Value::Str(m), Value::Str(n)) => self.stack.push(Value::Global(m, n)),
                        _ => return Err(bad("STACK_GLOBAL needs two strings")),
                    }
                }
                b'R' | 0x81 => {
                    let args = self.pop()?;
                    let callable = self.pop()?;
                    let v = self.reduce(callable, args)?;
                    self.stack.push(v);
                }
                b'b' => {
                    let state = self.pop()?;
                    match self.top()? {
                        Value::Object(obj) => obj.borrow_mut().state = Some(state),
                        _ => return Err(bad("BUILD target is not an object")),
                    }
                }
                b'q' => {
                    let k = self.u8()? as u32;
                    self.memo_put(k)?;
                }
                b'r' => {
                    let k = self.u32()?;
                    self.memo_put(k)?;
                }
                b'p' => {
                    let k = self.line()?.parse().map_err(|_| bad("bad PUT index"))?;
                    self.memo_put(k)?;
                }
                0x94 => {
                    let k = self.memo.len() as u32;
                    self.memo_put(k)?;
                }
                b'h' => {
                    let k = self.u8()? as u32;
                    let v = self.memo_get(k)?;
                    self.stack.push(v);
                }
                b'j' => {
                    let k = self.u32()?;
                    let v = self.memo_get(k)?;
                    self.stack.push(v);
                }
                b'g' => {
                    let k = self.line()?.parse().map_err(|_| bad("bad GET index"))?;
                    let v = self.memo_get(k)?;
                    self.stack.push(v);
                }
                other => {
                    return Err(bad(format!(
                        "unsupported pickle opcode 0x{other:02x} at byte {}",
                        self.pos - 1
                    )))
                }
            }
        }
    }
}

fn unpickle(bytes: &[u8]) -> Result<Value> {
    Machine {
        data: bytes,
        pos: 0,
        stack: Vec::new(),
        memo: BTreeMap::new(),
    }
    .run()
}

fn tuple_items(v: &Value) -> Option<&[Value]> {
    match v {
        Value::Tuple(t) => Some(t),
        _ => None,
    }
}

fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::Str(s) => Some(s.to_string()),
        Value::Bytes(b) => Some(b.iter().map(|&c| c as char).collect()),
        _ => None,
    }
}

fn as_raw(v: &Value) -> Option<Rc<[u8]>> {
    match v {
        Value::Bytes(b) => Some(b.clone()),
        // Python 2 `str` decoded with latin1 by Python 3 writers.
        Value::Str(s) => s
            .chars()
            .map(|c| u8::try_from(u32::from(c)).ok())
            .collect::<Option<Vec<u8>>>()
            .map(Rc::from),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy)]
struct ArrayType {
    scalar: Scalar,
    big_endian: bool,
}

fn decode_dtype(v: &Value) -> Result<ArrayType> {
    let obj = match v {
        Value::Object(o) => o.borrow(),
        _ => return Err(bad("array dtype is not a numpy dtype object")),
    };
    if &*obj.name != "dtype" {
        return Err(bad(format!("expected numpy dtype, found {}.{}", obj.module, obj.name)));
    }
    let code = tuple_items(&obj.args)
        .and_then(|a| a.first())
        .and_then(as_text)
        .ok_or_else(|| bad("dtype without a type code"))?;
    let (order_prefix, code) = match code.as_bytes().first() {
        Some(b'<' | b'>' | b'=' | b'|') => (Some(code.as_bytes()[0]), &code[1..]),
        _ => (None, code.as_str()),
    };
    let scalar = match code {
        "f4" => Scalar::F32,
        "f8" => Scalar::F64,
        other => return Err(bad(format!("unsupported array dtype {other:?}"))),
    };
    let state_order = obj
        .state
        .as_ref()
        .and_then(tuple_items)
        .and_then(|s| s.get(1))
        .and_then(as_text)
        .and_then(|s| s.bytes().next());
    let big_endian = matches!(order_prefix.or(state_order), Some(b'>'));
    Ok(ArrayType { scalar, big_endian })
}

struct RawArray {
    shape: Vec<usize>,
    values: Vec<f32>,
}

fn shape_of(v: &Value) -> Result<Vec<usize>> {
    tuple_items(v)
        .ok_or_else(|| bad("array shape is not a tuple"))?
        .iter()
        .map(|d| match d {
            Value::Int(n) if *n >= 0 => Ok(*n as usize),
            _ => Err(bad("array dimension is not a non-negative int")),
        })
        .collect()
}

fn decode_values(raw: &[u8], ty: ArrayType, count: usize) -> Result<Vec<f32>> {
    let width = match ty.scalar {
        Scalar::F32 => 4,
        Scalar::F64 => 8,
    };
    if raw.len() != count * width {
        return Err(bad(format!(
            "array payload has {} bytes, shape needs {}",
            raw.len(),
            count * width
        )));
    }
    Ok(raw
        .chunks_exact(width)
        .map(|c| match (ty.scalar, ty.big_endian) {
            (Scalar::F32, false) => f32::from_le_bytes(c.try_into().unwrap()),
            (Scalar::F32, true) => f32::from_be_bytes(c.try_into().unwrap()),
            (Scalar::F64, false) => f64::from_le_bytes(c.try_into().unwrap()) as f32,
            (Scalar::F64, true) => f64::from_be_bytes(c.try_into().unwrap()) as f32,
        })
        .collect())
}

fn decode_array(v: &Value) -> Result<RawArray> {
    let obj = match v {
        Value::Object(o) => o.borrow(),
        _ => return Err(bad("cell value is not a numpy array")),
    };
    let (shape, ty, raw, fortran) = match &*obj.name {
        "_reconstruct" => {
            let state = obj
                .state
                .as_ref()
                .and_then(tuple_items)
                .ok_or_else(|| bad("numpy array without state"))?;
            // (version, shape, dtype, is_fortran, data); older writers omit version.
            let s = if state.len() == 5 { &state[1..] } else { state };
            if s.len() != 4 {
                return Err(bad("unexpected numpy array state layout"));
            }
            let fortran = matches!(s[2], Value::Bool(true) | Value::Int(1));
            let raw = as_raw(&s[3]).ok_or_else(|| bad("numpy object arrays are not supported"))?;
            (shape_of(&s[0])?, decode_dtype(&s[1])?, raw, fortran)
        }
        "_frombuffer" => {
            let a = tuple_items(&obj.args).ok_or_else(|| bad("_frombuffer without args"))?;
            if a.len() != 4 {
                return Err(bad("unexpected _frombuffer arguments"));
            }
            let raw = as_raw(&a[0]).ok_or_else(|| bad("_frombuffer buffer is not bytes"))?;
            let fortran = as_text(&a[3]).as_deref() == Some("F");
            (shape_of(&a[2])?, decode_dtype(&a[1])?, raw, fortran)
        }
        other => return Err(bad(format!("cell value is {}.{other}, not an array", obj.module))),
    };
    if fortran && shape.iter().filter(|&&d| d > 1).count() > 1 {
        return Err(bad("Fortran-ordered arrays are not supported"));
    }
    let count = shape.iter().product();
    let values = decode_values(&raw, ty, count)?;
    Ok(RawArray { shape, values })
}

fn decode_key(k: &Value) -> Result<(String, i64)> {
    let items = tuple_items(k).ok_or_else(|| bad(format!("key {k:?} is not a (name, snr) tuple")))?;
    match items {
        [name, Value::Int(snr)] => {
            let name = as_text(name).ok_or_else(|| bad(format!("key {k:?} has a non-string name")))?;
            Ok((name, *snr))
        }
        _ => Err(bad(format!("key {k:?} is not a (name, snr) tuple"))),
    }
}

/// Parses an in-memory upstream pickle into a dataset.
pub fn parse_upstream(bytes: &[u8]) -> Result<Dataset> {
    let root = unpickle(bytes)?;
    let entries = match root {
        Value::Dict(d) => d,
        _ => return Err(bad("top-level object is not a dict")),
    };
    if entries.is_empty() {
        return Err(bad("no cells found"));
    }

    let mut cells: BTreeMap<(ModulationClass, i32), (String, RawArray)> = BTreeMap::new();
    for (k, v) in &entries {
        let (name, snr) = decode_key(k)?;
        let label = format!("({name}, {snr})");
        let class: ModulationClass = name
            .parse()
            .map_err(|_| bad(format!("cell {label}: unknown modulation {name:?}")))?;
        let snr = i32::try_from(snr).map_err(|_| bad(format!("cell {label}: SNR out of range")))?;
        let arr = decode_array(v).map_err(|e| bad(format!("cell {label}: {e}")))?;
        if cells.insert((class, snr), (label.clone(), arr)).is_some() {
            return Err(bad(format!("cell {label} appears twice")));
        }
    }

    // Every cell must share the modal example count.
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, arr) in cells.values() {
        *counts.entry(arr.shape.first().copied().unwrap_or(0)).or_default() += 1;
    }
    let per_cell = counts
        .iter()
        .max_by_key(|&(&n, &freq)| (freq, n))
        .map(|(&n, _)| n)
        .unwrap();
    for (label, arr) in cells.values() {
        if arr.shape != [per_cell, 2, FRAME_LEN] {
            return Err(bad(format!(
                "cell {label} has shape {:?}, expected [{per_cell}, 2, {FRAME_LEN}]",
                arr.shape
            )));
        }
    }
    if per_cell == 0 {
        return Err(bad("cells hold no examples"));
    }

    let classes: Vec<ModulationClass> = {
        let mut c: Vec<_> = cells.keys().map(|k| k.0).collect();
        c.dedup();
        c
    };
    let grid: Vec<i32> = {
        let mut g: Vec<_> = cells.keys().map(|k| k.1).collect();
        g.sort();
        g.dedup();
        g
    };
    let mut examples = Vec::with_capacity(classes.len() * grid.len() * per_cell);
    for &class in &classes {
        for &snr in &grid {
            let (_, arr) = cells
                .get(&(class, snr))
                .ok_or_else(|| bad(format!("cell ({class}, {snr}) missing from the grid")))?;
            for frame in arr.values.chunks_exact(2 * FRAME_LEN) {
                let iq = IqFrame::from_fn(|r, i| frame[r * FRAME_LEN + i] as f64);
                if !iq.is_finite() {
                    return Err(bad(format!("cell ({class}, {snr}) holds non-finite samples")));
                }
                examples.push(SignalExample {
                    iq,
                    label: class,
                    snr_db: snr,
                });
            }
        }
    }
    let manifest = DatasetManifest::new(classes, grid, per_cell, 0);
    Dataset::new(manifest, examples)
}

pub fn load_upstream(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_upstream(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_dict_root() {
        // PROTO 2, EMPTY_LIST, STOP
        let err = parse_upstream(&[0x80, 2, b']', b'.']).unwrap_err();
        assert!(err.to_string().contains("not a dict"));
    }

    #[test]
    fn empty_dict_reports_no_cells() {
        let err = parse_upstream(&[0x80, 2, b'}', b'.']).unwrap_err();
        assert!(err.to_string().contains("no cells found"), "{err}");
    }

    #[test]
    fn truncated_stream_is_an_ingestion_error() {
        let err = parse_upstream(&[0x80, 2, b'}', b'U', 9, b'a']).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
    }

    #[test]
    fn long1_decodes_negative_values() {
        // PROTO 2, LONG1 1 byte 0xec (-20), STOP
        match unpickle(&[0x80, 2, 0x8a, 1, 0xec, b'.']).unwrap() {
            Value::Int(v) => assert_eq!(v, -20),
            other => panic!("{other:?}"),
        }
    }
}
