use std::path::Path;

use super::{ActShape, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

fn parse_args(line: usize, keyword: &str, args: &[&str], arity: usize) -> Result<Vec<usize>> {
    if args.len() != arity {
        return Err(Error::Parse {
            line,
            message: format!("`{keyword}` takes {arity} arguments, got {}", args.len()),
        });
    }
    args.iter()
        .map(|a| {
            a.parse::<usize>().map_err(|_| Error::Parse {
                line,
                message: format!("`{keyword}`: `{a}` is not a non-negative integer"),
            })
        })
        .collect()
}

/// Parse the line-oriented network format:
///
/// ```text
/// # comment
/// input C H W
/// conv N k stride pad
/// relu
/// maxpool k stride
/// fc U
/// softmax K
/// ```
pub fn parse_network(text: &str) -> Result<NetworkSpec> {
    parse_named(text, "net")
}

pub fn parse_network_file(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "net".into());
    parse_named(&text, &name)
}

fn parse_named(text: &str, name: &str) -> Result<NetworkSpec> {
    let mut input = None;
    let mut layers = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let Some((&keyword, args)) = tokens.split_first() else {
            continue;
        };
        if keyword == "input" {
            if input.is_some() || !layers.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "`input` must appear once, before any layer".into(),
                });
            }
            let v = parse_args(line, keyword, args, 3)?;
            input = Some(ActShape::Map {
                c: v[0],
                h: v[1],
                w: v[2],
            });
            continue;
        }
        if input.is_none() {
            return Err(Error::Parse {
                line,
                message: "first declaration must be `input C H W`".into(),
            });
        }
        let layer = match keyword {
            "conv" => {
                let v = parse_args(line, keyword, args, 4)?;
                LayerSpec::Conv {
                    filters: v[0],
                    kernel: v[1],
                    stride: v[2],
                    pad: v[3],
                }
            }
            "relu" => {
                parse_args(line, keyword, args, 0)?;
                LayerSpec::Relu
            }
            "maxpool" => {
                let v = parse_args(line, keyword, args, 2)?;
                LayerSpec::MaxPool {
                    kernel: v[0],
                    stride: v[1],
                }
            }
            "fc" => LayerSpec::Fc {
                units: parse_args(line, keyword, args, 1)?[0],
            },
            "softmax" => LayerSpec::SoftmaxXent {
                classes: parse_args(line, keyword, args, 1)?[0],
            },
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown layer keyword `{other}`"),
                });
            }
        };
        layers.push(layer);
    }
    let input = input.ok_or_else(|| Error::Parse {
        line: 0,
        message: "missing `input C H W` declaration".into(),
    })?;
    NetworkSpec::new(name, input, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_small_network() {
        let net = parse_network("input 1 8 8\nconv 4 3 1 1\nrelu\nfc 10\nsoftmax 10\n").unwrap();
        // input line + four layers
        assert_eq!(net.layers().len(), 4);
        assert_eq!(net.shapes()[0], ActShape::Map { c: 4, h: 8, w: 8 });
        assert_eq!(net.input(), ActShape::Map { c: 1, h: 8, w: 8 });
    }

    #[test]
    fn comments_and_blanks() {
        let text = "# tiny\n\ninput 1 4 4  # image\nfc 2 # head\nsoftmax 2\n";
        assert_eq!(parse_network(text).unwrap().layers().len(), 2);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            parse_network("input 1 4 4\nsoftmax 2\n"),
            Err(Error::Layer { layer: 0, .. })
        ));
        assert!(matches!(
            parse_network("input 1 4 4\nlrn 5\nfc 2\nsoftmax 2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_network("input 1 4 4\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_network("input 1 4 4\nsoftmax 2\nfc 2\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_network("conv 1 1 1 0\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_network("input 1 4 4\nconv 2 3 x 0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        // conv 3x3 stride 2 does not tile 4 + 0 padding
        assert!(matches!(
            parse_network("input 1 4 4\nconv 2 3 2 0\nfc 2\nsoftmax 2\n"),
            Err(Error::Layer { layer: 0, .. })
        ));
    }
}
