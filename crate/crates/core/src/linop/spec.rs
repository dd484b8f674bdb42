//! Operator spec strings.
//!
//! ```text
//! spec := atom | "compose(" spec ("," spec)* ")"
//! atom := "identity" | "zero:" INT | "grayscale" | "avgpool:" INT | "mask:" PATH
//!       | "blur:" ("gauss:"|"uniform:"|"aniso:") INT [":" REAL [":" REAL]]
//!       | "cs:walsh:" REAL ":" INT | "matrix:" PATH
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linop::blur::BlurKind;

pub const MAX_COMPOSE_DEPTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum SpecNode {
    Identity,
    Zero(usize),
    Grayscale,
    AvgPool(usize),
    Mask(PathBuf),
    Blur { kind: BlurKind, size: usize },
    Walsh { ratio: f64, seed: u64 },
    Matrix(PathBuf),
    Compose(Vec<SpecNode>),
}

/// A parsed operator spec together with its source text.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpec {
    text: String,
    node: SpecNode,
}

impl OperatorSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let node = parse_node(text.trim(), 0)?;
        Ok(Self {
            text: text.trim().to_string(),
            node,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn node(&self) -> &SpecNode {
        &self.node
    }
}

impl FromStr for OperatorSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl fmt::Display for SpecNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecNode::Identity => write!(f, "identity"),
            SpecNode::Zero(d) => write!(f, "zero:{d}"),
            SpecNode::Grayscale => write!(f, "grayscale"),
            SpecNode::AvgPool(n) => write!(f, "avgpool:{n}"),
            SpecNode::Mask(p) => write!(f, "mask:{}", p.display()),
            SpecNode::Matrix(p) => write!(f, "matrix:{}", p.display()),
            SpecNode::Walsh { ratio, seed } => write!(f, "cs:walsh:{ratio}:{seed}"),
            SpecNode::Blur { kind, size } => match kind {
                BlurKind::Gauss { width } => write!(f, "blur:gauss:{size}:{width}"),
                BlurKind::Uniform => write!(f, "blur:uniform:{size}"),
                BlurKind::Aniso { width_x, width_y } => {
                    write!(f, "blur:aniso:{size}:{width_x}:{width_y}")
                }
            },
            SpecNode::Compose(children) => {
                write!(f, "compose(")?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{c}")?;
                }
                write!(f, ")")
            }
        }
    }
}

fn parse_node(text: &str, depth: usize) -> Result<SpecNode> {
    if let Some(inner) = text.strip_prefix("compose(") {
        if depth >= MAX_COMPOSE_DEPTH {
            return Err(Error::spec(
                text,
                format!("compose nesting exceeds {MAX_COMPOSE_DEPTH}"),
            ));
        }
        let inner = inner
            .strip_suffix(')')
            .ok_or_else(|| Error::spec(text, "missing closing parenthesis"))?;
        let parts = split_top_level(inner).map_err(|m| Error::spec(text, m))?;
        if parts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::spec(text, "empty compose argument"));
        }
        let children = parts
            .into_iter()
            .map(|p| parse_node(p.trim(), depth + 1))
            .collect::<Result<Vec<_>>>()?;
        return Ok(SpecNode::Compose(children));
    }
    parse_atom(text)
}

fn split_top_level(s: &str) -> std::result::Result<Vec<&str>, String> {
    let mut parts = Vec::new();
    let (mut depth, mut start) = (0usize, 0usize);
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| "unbalanced parenthesis".to_string())?
            }
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err("unbalanced parenthesis".into());
    }
    parts.push(&s[start..]);
    Ok(parts)
}

fn parse_atom(text: &str) -> Result<SpecNode> {
    let err = |m: &str| Error::spec(text, m);
    let int = |s: &str| s.parse::<usize>().map_err(|_| err(&format!("`{s}` is not an integer")));
    let real = |s: &str| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| err(&format!("`{s}` is not a real number")))
    };

    match text {
        "identity" => return Ok(SpecNode::Identity),
        "grayscale" => return Ok(SpecNode::Grayscale),
        _ => {}
    }
    if let Some(rest) = text.strip_prefix("zero:") {
        return Ok(SpecNode::Zero(int(rest)?));
    }
    if let Some(rest) = text.strip_prefix("avgpool:") {
        let n = int(rest)?;
        if n == 0 {
            return Err(err("pool size must be positive"));
        }
        return Ok(SpecNode::AvgPool(n));
    }
    if let Some(rest) = text.strip_prefix("mask:") {
        if rest.is_empty() {
            return Err(err("missing mask path"));
        }
        return Ok(SpecNode::Mask(PathBuf::from(rest)));
    }
    if let Some(rest) = text.strip_prefix("matrix:") {
        if rest.is_empty() {
            return Err(err("missing matrix path"));
        }
        return Ok(SpecNode::Matrix(PathBuf::from(rest)));
    }
    if let Some(rest) = text.strip_prefix("cs:walsh:") {
        let (ratio, seed) = rest
            .split_once(':')
            .ok_or_else(|| err("expected cs:walsh:RATIO:SEED"))?;
        let ratio = real(ratio)?;
        let seed = seed
            .parse::<u64>()
            .map_err(|_| err(&format!("`{seed}` is not a seed")))?;
        return Ok(SpecNode::Walsh { ratio, seed });
    }
    if let Some(rest) = text.strip_prefix("blur:") {
        let fields: Vec<&str> = rest.split(':').collect();
        let (family, args) = fields.split_first().ok_or_else(|| err("empty blur spec"))?;
        let size = int(args.first().ok_or_else(|| err("missing kernel size"))?)?;
        if size == 0 {
            return Err(err("kernel size must be positive"));
        }
        let reals = args[1..].iter().map(|s| real(s)).collect::<Result<Vec<_>>>()?;
        let kind = match (*family, reals.as_slice()) {
            ("gauss", [w]) => BlurKind::Gauss { width: *w },
            ("uniform", [] | [_]) => BlurKind::Uniform,
            ("aniso", [w]) => BlurKind::Aniso {
                width_x: *w,
                width_y: *w,
            },
            ("aniso", [wx, wy]) => BlurKind::Aniso {
                width_x: *wx,
                width_y: *wy,
            },
            ("gauss" | "uniform" | "aniso", _) => return Err(err("wrong number of blur parameters")),
            _ => return Err(err(&format!("unknown blur family `{family}`"))),
        };
        if let BlurKind::Gauss { width } | BlurKind::Aniso { width_x: width, .. } = kind {
            if width <= 0.0 {
                return Err(err("blur width must be positive"));
            }
        }
        if let BlurKind::Aniso { width_y, .. } = kind {
            if width_y <= 0.0 {
                return Err(err("blur width must be positive"));
            }
        }
        return Ok(SpecNode::Blur { kind, size });
    }
    Err(err("unknown operator"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atoms() {
        let p = |s: &str| OperatorSpec::parse(s).unwrap().node().clone();
        assert_eq!(p("identity"), SpecNode::Identity);
        assert_eq!(p("zero:12"), SpecNode::Zero(12));
        assert_eq!(p("avgpool:4"), SpecNode::AvgPool(4));
        assert_eq!(p("mask:dir/m.pgm"), SpecNode::Mask("dir/m.pgm".into()));
        assert_eq!(p("cs:walsh:0.25:7"), SpecNode::Walsh { ratio: 0.25, seed: 7 });
        assert_eq!(
            p("blur:gauss:5:10.0"),
            SpecNode::Blur {
                kind: BlurKind::Gauss { width: 10.0 },
                size: 5
            }
        );
        assert_eq!(
            p("blur:uniform:3"),
            SpecNode::Blur {
                kind: BlurKind::Uniform,
                size: 3
            }
        );
        assert_eq!(
            p("blur:aniso:5:2:0.5"),
            SpecNode::Blur {
                kind: BlurKind::Aniso {
                    width_x: 2.0,
                    width_y: 0.5
                },
                size: 5
            }
        );
    }

    #[test]
    fn nested_compose() {
        let s = OperatorSpec::parse("compose(mask:m.pgm,compose(grayscale,identity),avgpool:4)").unwrap();
        let SpecNode::Compose(children) = s.node() else {
            panic!()
        };
        assert_eq!(children.len(), 3);
        assert!(matches!(&children[1], SpecNode::Compose(c) if c.len() == 2));
    }

    #[test]
    fn display_round_trips() {
        for text in [
            "compose(mask:m.pgm,grayscale,avgpool:4)",
            "blur:aniso:5:2:0.5",
            "cs:walsh:0.25:3",
        ] {
            let s = OperatorSpec::parse(text).unwrap();
            assert_eq!(s.node().to_string(), text);
        }
    }

    #[test]
    fn depth_limit() {
        let mut s = "identity".to_string();
        for _ in 0..8 {
            s = format!("compose({s})");
        }
        assert!(OperatorSpec::parse(&s).is_ok());
        let too_deep = format!("compose({s})");
        assert!(OperatorSpec::parse(&too_deep).is_err());
    }

    #[test]
    fn errors_name_the_fragment() {
        for bad in [
            "avgpool:x",
            "blur:box:3:1",
            "compose(grayscale,",
            "compose(grayscale,,identity)",
            "cs:walsh:abc:1",
            "nonsense",
            "blur:gauss:5:-1",
        ] {
            match OperatorSpec::parse(bad) {
                Err(Error::Spec { fragment, .. }) => assert!(bad.contains(fragment.as_str())),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }
}
