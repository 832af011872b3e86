//! Versioned JSON documents for CSG trees.
//!
//! ```json
//! {
//!   "version": 1,
//!   "dimension": 2,
//!   "omega": "1.0000000000000000e1",
//!   "temperature": "1.0000000000000000e3",
//!   "nodes": [
//!     {"id": 0, "kind": "sphere", "center": ["0", "0"], "radius_raw": "0.5", "sharpness": "20"},
//!     {"id": 1, "kind": "quadric", "q": [...10 values...], "sharpness": "1", "crisp": true},
//!     {"id": 2, "kind": "boolean", "op": "unified", "c_raw": [...4 values...], "children": [0, 1]}
//!   ]
//! }
//! ```
//!
//! Nodes are listed in post-order with `id` equal to the position; the root is
//! the last node. Reals are written as strings with 17 significant digits so
//! that parameters round-trip bit-exactly. Readers also accept plain JSON
//! numbers. Boolean `op` is one of `unified` (`c_raw`), `bilinear` (`uv_raw`),
//! `product` or `godel` (both with `operation`: `intersection`, `union`,
//! `difference`, `reverse-difference`). A `constant` node carries `value`.

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::fuzzy::OpKind;
use crate::primitives::{PlanePrimitive, Point, Primitive, QuadricPrimitive, SpherePrimitive};
use crate::tree::{BooleanOp, ControlConfig, CsgTree, Node};

pub const TREE_DOC_VERSION: u64 = 1;

/// `v` with 17 significant digits.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn real(v: f64) -> Value {
    Value::String(format_real(v))
}

fn reals(vs: &[f64]) -> Value {
    Value::Array(vs.iter().map(|&v| real(v)).collect())
}

pub fn tree_to_value(tree: &CsgTree) -> Value {
    let nodes: Vec<Value> = tree
        .nodes()
        .iter()
        .enumerate()
        .map(|(id, node)| {
            let mut obj = Map::new();
            obj.insert("id".into(), json!(id));
            match node {
                Node::Leaf { primitive, crisp } => {
                    obj.insert("kind".into(), json!(primitive.kind().name()));
                    match primitive {
                        Primitive::Quadric(q) => {
                            obj.insert("q".into(), reals(&q.q));
                        }
                        Primitive::Sphere(s) => {
                            obj.insert("center".into(), reals(s.center.coords()));
                            obj.insert("radius_raw".into(), real(s.radius_raw));
                        }
                        Primitive::Plane(p) => {
                            obj.insert("normal".into(), reals(&p.normal[..primitive.dim()]));
                            obj.insert("offset".into(), real(p.offset));
                        }
                    }
                    obj.insert("sharpness".into(), real(primitive.sharpness()));
                    if *crisp {
                        obj.insert("crisp".into(), json!(true));
                    }
                }
                Node::Constant(v) => {
                    obj.insert("kind".into(), json!("constant"));
                    obj.insert("value".into(), real(*v));
                }
                Node::Boolean { op, left, right } => {
                    obj.insert("kind".into(), json!("boolean"));
                    match op {
                        BooleanOp::Unified { c_raw } => {
                            obj.insert("op".into(), json!("unified"));
                            obj.insert("c_raw".into(), reals(c_raw));
                        }
                        BooleanOp::Bilinear { uv_raw } => {
                            obj.insert("op".into(), json!("bilinear"));
                            obj.insert("uv_raw".into(), reals(uv_raw));
                        }
                        BooleanOp::Product(k) => {
                            obj.insert("op".into(), json!("product"));
                            obj.insert("operation".into(), json!(k.name()));
                        }
                        BooleanOp::Godel(k) => {
                            obj.insert("op".into(), json!("godel"));
                            obj.insert("operation".into(), json!(k.name()));
                        }
                    }
                    obj.insert("children".into(), json!([left, right]));
                }
            }
            Value::Object(obj)
        })
        .collect();
    let control = tree.control();
    json!({
        "version": TREE_DOC_VERSION,
        "dimension": tree.dim(),
        "omega": real(control.omega),
        "temperature": real(control.temperature),
        "nodes": nodes,
    })
}

pub fn serialize(tree: &CsgTree) -> String {
    serde_json::to_string_pretty(&tree_to_value(tree)).expect("tree documents always serialize")
}

pub fn deserialize(text: &str) -> Result<CsgTree> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::parse("$", e.to_string()))?;
    tree_from_value(&doc)
}

pub(crate) fn parse_real(v: &Value, path: &str) -> Result<f64> {
    let x = match v {
        Value::String(s) => s
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::parse(path, format!("'{s}' is not a real number")))?,
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| Error::parse(path, "number out of range"))?,
        _ => return Err(Error::parse(path, "expected a real number")),
    };
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::parse(path, "value must be finite"))
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::parse(path, format!("missing field '{key}'")))
}

fn real_field(obj: &Map<String, Value>, key: &str, path: &str) -> Result<f64> {
    parse_real(field(obj, key, path)?, &format!("{path}.{key}"))
}

fn real_array(obj: &Map<String, Value>, key: &str, len: usize, path: &str) -> Result<Vec<f64>> {
    let p = format!("{path}.{key}");
    let arr = field(obj, key, path)?
        .as_array()
        .ok_or_else(|| Error::parse(&p, "expected an array"))?;
    if arr.len() != len {
        return Err(Error::parse(
            &p,
            format!("expected {len} values, found {}", arr.len()),
        ));
    }
    arr.iter()
        .enumerate()
        .map(|(i, v)| parse_real(v, &format!("{p}[{i}]")))
        .collect()
}

pub fn tree_from_value(doc: &Value) -> Result<CsgTree> {
    let root = doc
        .as_object()
        .ok_or_else(|| Error::parse("$", "document must be a JSON object"))?;
    let version = field(root, "version", "$")?
        .as_u64()
        .ok_or_else(|| Error::parse("$.version", "expected a non-negative integer"))?;
    if version != TREE_DOC_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: TREE_DOC_VERSION,
        });
    }
    let dim = field(root, "dimension", "$")?
        .as_u64()
        .filter(|d| *d == 2 || *d == 3)
        .ok_or_else(|| Error::parse("$.dimension", "expected 2 or 3"))? as usize;
    let control = ControlConfig {
        omega: match root.get("omega") {
            Some(v) => parse_real(v, "$.omega")?,
            None => ControlConfig::default().omega,
        },
        temperature: match root.get("temperature") {
            Some(v) => parse_real(v, "$.temperature")?,
            None => ControlConfig::default().temperature,
        },
    };
    let nodes_v = field(root, "nodes", "$")?
        .as_array()
        .ok_or_else(|| Error::parse("$.nodes", "expected an array"))?;
    let mut nodes = Vec::with_capacity(nodes_v.len());
    for (pos, nv) in nodes_v.iter().enumerate() {
        let path = format!("$.nodes[{pos}]");
        let obj = nv
            .as_object()
            .ok_or_else(|| Error::parse(&path, "expected an object"))?;
        let id = field(obj, "id", &path)?
            .as_u64()
            .ok_or_else(|| Error::parse(format!("{path}.id"), "expected an integer"))?
            as usize;
        if id != pos {
            return Err(Error::parse(
                &path,
                format!("node id {id} out of post-order position {pos}"),
            ));
        }
        let kind = field(obj, "kind", &path)?
            .as_str()
            .ok_or_else(|| Error::parse(format!("{path}.kind"), "expected a string"))?;
        let node = match kind {
            "boolean" => parse_boolean(obj, id, &path)?,
            "constant" => Node::Constant(real_field(obj, "value", &path)?),
            "quadric" | "sphere" | "plane" => parse_leaf(obj, kind, dim, &path)?,
            other => {
                return Err(Error::Schema(format!(
                    "node {id}: unknown node kind '{other}' (expected boolean, constant, quadric, sphere or plane)"
                )))
            }
        };
        nodes.push(node);
    }
    CsgTree::from_nodes(dim, control, nodes).map_err(|e| Error::parse("$.nodes", e.to_string()))
}

fn parse_boolean(obj: &Map<String, Value>, id: usize, path: &str) -> Result<Node> {
    let children = obj
        .get("children")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(path, format!("boolean node {id} is missing its children")))?;
    if children.len() != 2 {
        return Err(Error::parse(
            path,
            format!(
                "boolean node {id} needs exactly two children, found {}",
                children.len()
            ),
        ));
    }
    let child = |i: usize| -> Result<usize> {
        children[i].as_u64().map(|c| c as usize).ok_or_else(|| {
            Error::parse(
                format!("{path}.children[{i}]"),
                format!("boolean node {id}: child id must be an integer"),
            )
        })
    };
    let (left, right) = (child(0)?, child(1)?);
    let op_name = field(obj, "op", path)?
        .as_str()
        .ok_or_else(|| Error::parse(format!("{path}.op"), "expected a string"))?;
    let operation = || -> Result<OpKind> {
        let name = field(obj, "operation", path)?
            .as_str()
            .ok_or_else(|| Error::parse(format!("{path}.operation"), "expected a string"))?;
        OpKind::from_name(name)
            .ok_or_else(|| Error::Schema(format!("boolean node {id}: unknown operation '{name}'")))
    };
    let op = match op_name {
        "unified" => {
            let v = real_array(obj, "c_raw", 4, path)?;
            BooleanOp::Unified {
                c_raw: [v[0], v[1], v[2], v[3]],
            }
        }
        "bilinear" => {
            let v = real_array(obj, "uv_raw", 2, path)?;
            BooleanOp::Bilinear {
                uv_raw: [v[0], v[1]],
            }
        }
        "product" => BooleanOp::Product(operation()?),
        "godel" => BooleanOp::Godel(operation()?),
        other => {
            return Err(Error::Schema(format!(
                "boolean node {id}: unknown boolean op '{other}'"
            )))
        }
    };
    Ok(Node::Boolean { op, left, right })
}

fn parse_leaf(obj: &Map<String, Value>, kind: &str, dim: usize, path: &str) -> Result<Node> {
    let sharpness = real_field(obj, "sharpness", path)?;
    let crisp = match obj.get("crisp") {
        None => false,
        Some(v) => v
            .as_bool()
            .ok_or_else(|| Error::parse(format!("{path}.crisp"), "expected true or false"))?,
    };
    let invalid = |e: Error| Error::parse(path, e.to_string());
    let primitive = match kind {
        "quadric" => {
            let q = real_array(obj, "q", 10, path)?;
            let mut arr = [0.0; 10];
            arr.copy_from_slice(&q);
            Primitive::Quadric(QuadricPrimitive::new(dim, arr, sharpness).map_err(invalid)?)
        }
        "sphere" => {
            let center = Point::new(&real_array(obj, "center", dim, path)?).map_err(invalid)?;
            let raw = match obj.get("radius") {
                Some(r) => {
                    let r = parse_real(r, &format!("{path}.radius"))?;
                    SpherePrimitive::new(center, r, sharpness)
                        .map_err(invalid)?
                        .radius_raw
                }
                None => real_field(obj, "radius_raw", path)?,
            };
            Primitive::Sphere(SpherePrimitive {
                center,
                radius_raw: raw,
                sharpness,
            })
        }
        "plane" => {
            let normal = real_array(obj, "normal", dim, path)?;
            let offset = real_field(obj, "offset", path)?;
            Primitive::Plane(PlanePrimitive::new(&normal, offset, sharpness).map_err(invalid)?)
        }
        _ => unreachable!("caller matched the leaf kinds"),
    };
    Ok(Node::Leaf { primitive, crisp })
}
