//! Just enough protobuf decoding to read an ONNX model's graph signature and
//! metadata without loading its weights.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemType {
    Float,
    Int64,
    Other(i64),
}

impl ElemType {
    fn from_code(code: i64) -> Self {
        match code {
            1 => ElemType::Float,
            7 => ElemType::Int64,
            c => ElemType::Other(c),
        }
    }

    pub fn name(self) -> String {
        match self {
            ElemType::Float => "float32".into(),
            ElemType::Int64 => "int64".into(),
            ElemType::Other(c) => format!("onnx type {c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dim {
    Value(i64),
    Param(String),
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub elem_type: Option<ElemType>,
    /// `None` when the graph leaves the shape unspecified.
    pub dims: Option<Vec<Dim>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelInfo {
    pub has_graph: bool,
    pub inputs: Vec<TensorInfo>,
    pub outputs: Vec<TensorInfo>,
    pub metadata: BTreeMap<String, String>,
}

enum Value<'a> {
    Varint(u64),
    Bytes(&'a [u8]),
    Fixed,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn varint(&mut self) -> Result<u64, String> {
        let mut out = 0u64;
        for shift in (0..64).step_by(7) {
            let b = *self.buf.get(self.pos).ok_or("truncated varint")?;
            self.pos += 1;
            out |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(out);
            }
        }
        Err("varint too long".into())
    }

    fn skip(&mut self, n: usize) -> Result<(), String> {
        if self.buf.len() - self.pos < n {
            return Err("truncated field".into());
        }
        self.pos += n;
        Ok(())
    }

    fn field(&mut self) -> Result<Option<(u64, Value<'a>)>, String> {
        if self.pos >= self.buf.len() {
            return Ok(None);
        }
        let key = self.varint()?;
        let value = match key & 7 {
            0 => Value::Varint(self.varint()?),
            1 => {
                self.skip(8)?;
                Value::Fixed
            }
            2 => {
                let n = self.varint()? as usize;
                let start = self.pos;
                self.skip(n)?;
                Value::Bytes(&self.buf[start..start + n])
            }
            5 => {
                self.skip(4)?;
                Value::Fixed
            }
            w => return Err(format!("unsupported wire type {w}")),
        };
        Ok(Some((key >> 3, value)))
    }
}

fn for_each<'a>(buf: &'a [u8], mut f: impl FnMut(u64, Value<'a>) -> Result<(), String>) -> Result<(), String> {
    let mut r = Reader::new(buf);
    while let Some((n, v)) = r.field()? {
        f(n, v)?;
    }
    Ok(())
}

fn string(bytes: &[u8]) -> Result<String, String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| "invalid UTF-8 string".to_string())
}

fn dimension(buf: &[u8]) -> Result<Dim, String> {
    let mut d = Dim::Unknown;
    for_each(buf, |n, v| {
        match (n, v) {
            (1, Value::Varint(x)) => d = Dim::Value(x as i64),
            (2, Value::Bytes(b)) => d = Dim::Param(string(b)?),
            _ => {}
        }
        Ok(())
    })?;
    Ok(d)
}

fn tensor_type(buf: &[u8], info: &mut TensorInfo) -> Result<(), String> {
    for_each(buf, |n, v| {
        match (n, v) {
            (1, Value::Varint(x)) => info.elem_type = Some(ElemType::from_code(x as i64)),
            (2, Value::Bytes(shape)) => {
                let mut dims = Vec::new();
                for_each(shape, |n, v| {
                    if let (1, Value::Bytes(b)) = (n, v) {
                        dims.push(dimension(b)?);
                    }
                    Ok(())
                })?;
                info.dims = Some(dims);
            }
            _ => {}
        }
        Ok(())
    })
}

fn value_info(buf: &[u8]) -> Result<TensorInfo, String> {
    let mut info = TensorInfo {
        name: String::new(),
        elem_type: None,
        dims: None,
    };
    for_each(buf, |n, v| {
        match (n, v) {
            (1, Value::Bytes(b)) => info.name = string(b)?,
            (2, Value::Bytes(ty)) => for_each(ty, |n, v| {
                if let (1, Value::Bytes(t)) = (n, v) {
                    tensor_type(t, &mut info)?;
                }
                Ok(())
            })?,
            _ => {}
        }
        Ok(())
    })?;
    Ok(info)
}

fn initializer_name(buf: &[u8]) -> Result<Option<String>, String> {
    let mut name = None;
    for_each(buf, |n, v| {
        if let (8, Value::Bytes(b)) = (n, v) {
            name = Some(string(b)?);
        }
        Ok(())
    })?;
    Ok(name)
}

fn graph(buf: &[u8], model: &mut ModelInfo) -> Result<(), String> {
    let mut initializers = Vec::new();
    for_each(buf, |n, v| {
        match (n, v) {
            (5, Value::Bytes(b)) => initializers.extend(initializer_name(b)?),
            (11, Value::Bytes(b)) => model.inputs.push(value_info(b)?),
            (12, Value::Bytes(b)) => model.outputs.push(value_info(b)?),
            _ => {}
        }
        Ok(())
    })?;
    // older exporters also list weights as graph inputs
    model.inputs.retain(|i| !initializers.contains(&i.name));
    Ok(())
}

fn metadata_entry(buf: &[u8]) -> Result<(String, String), String> {
    let (mut key, mut value) = (String::new(), String::new());
    for_each(buf, |n, v| {
        match (n, v) {
            (1, Value::Bytes(b)) => key = string(b)?,
            (2, Value::Bytes(b)) => value = string(b)?,
            _ => {}
        }
        Ok(())
    })?;
    Ok((key, value))
}

/// Reads graph inputs, outputs and `metadata_props` from a serialized
/// `ModelProto`.
pub fn parse_model(buf: &[u8]) -> Result<ModelInfo, String> {
    let mut model = ModelInfo::default();
    for_each(buf, |n, v| {
        match (n, v) {
            (7, Value::Bytes(b)) => {
                model.has_graph = true;
                graph(b, &mut model)?;
            }
            (14, Value::Bytes(b)) => {
                let (k, v) = metadata_entry(b)?;
                model.metadata.insert(k, v);
            }
            _ => {}
        }
        Ok(())
    })?;
    Ok(model)
}
