//! Checkpoint files: a structured text header (format version, architecture,
//! tensor manifest) followed by a raw little-endian 32-bit parameter payload
//! and a trailing FNV-1a checksum. Round-trips are bit-exact. Individuals
//! and evolution logs use checksummed text files.

use crate::error::{Error, Result};
use crate::evolution::EvolutionLog;
use crate::genome::{Individual, MaskLayer, MaskLayout};
use crate::nn::{LayerParams, LayerSpec, NetworkSpec, TrainedNetwork};
use crate::tensor::{fnv1a, Tensor};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

const NETWORK_MAGIC: &str = "evoprune network checkpoint v1";
const INDIVIDUAL_MAGIC: &str = "evoprune individual v1";
const LOG_MAGIC: &str = "evoprune evolution log v1";

fn parse_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

fn layer_line(layer: &LayerSpec) -> String {
    match *layer {
        LayerSpec::Conv {
            kernel_h,
            kernel_w,
            in_channels,
            out_filters,
            stride,
            padding,
        } => format!("layer conv {kernel_h} {kernel_w} {in_channels} {out_filters} {stride} {padding}"),
        LayerSpec::MaxPool { window, stride } => format!("layer maxpool {window} {stride}"),
        LayerSpec::Relu => "layer relu".into(),
        LayerSpec::BatchNorm { channels } => format!("layer batchnorm {channels}"),
        LayerSpec::SoftmaxLoss => "layer softmax-loss".into(),
    }
}

fn parse_layer(path: &Path, line: &str) -> Result<LayerSpec> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let num = |i: usize| -> Result<usize> {
        fields
            .get(i)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(path, 0, format!("malformed layer line {line:?}")))
    };
    match fields.get(1) {
        Some(&"conv") => Ok(LayerSpec::Conv {
            kernel_h: num(2)?,
            kernel_w: num(3)?,
            in_channels: num(4)?,
            out_filters: num(5)?,
            stride: num(6)?,
            padding: num(7)?,
        }),
        Some(&"maxpool") => Ok(LayerSpec::MaxPool {
            window: num(2)?,
            stride: num(3)?,
        }),
        Some(&"relu") => Ok(LayerSpec::Relu),
        Some(&"batchnorm") => Ok(LayerSpec::BatchNorm { channels: num(2)? }),
        Some(&"softmax-loss") => Ok(LayerSpec::SoftmaxLoss),
        other => Err(parse_err(path, 0, format!("unknown layer kind {other:?}"))),
    }
}

/// Writes a network checkpoint.
pub fn save_network(net: &TrainedNetwork<f32>, path: &Path) -> Result<()> {
    net.validate()?;
    let mut header = String::new();
    let _ = writeln!(header, "{NETWORK_MAGIC}");
    let (h, w, c) = net.spec.input;
    let _ = writeln!(header, "input {h} {w} {c}");
    let _ = writeln!(header, "classes {}", net.spec.class_count);
    for layer in &net.spec.layers {
        let _ = writeln!(header, "{}", layer_line(layer));
    }
    let tensors = net.parameter_tensors();
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(header, "tensor {name} {}", dims.join(" "));
    }
    let payload_len: usize = tensors.iter().map(|(_, t)| t.len() * 4).sum();
    let _ = writeln!(header, "payload {payload_len}");
    let _ = writeln!(header, "end");

    let mut payload = Vec::with_capacity(payload_len);
    for (_, t) in &tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&payload);

    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a network checkpoint, verifying format version and checksum.
pub fn load_network(path: &Path) -> Result<TrainedNetwork<f32>> {
    let bytes = std::fs::read(path)?;
    let end_marker = b"end\n";
    let header_end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| parse_err(path, 0, "missing end-of-header marker"))?
        + end_marker.len();
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| parse_err(path, 0, format!("header is not UTF-8: {e}")))?;

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != NETWORK_MAGIC {
        return Err(Error::Version {
            path: path.display().to_string(),
            found: magic.into(),
            expected: NETWORK_MAGIC.into(),
        });
    }

    let mut input = None;
    let mut classes = None;
    let mut layers = Vec::new();
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
    let mut payload_len = None;
    for line in lines {
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("input ") {
            let dims: Vec<usize> = rest
                .split_whitespace()
                .map(|v| v.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(path, 0, format!("bad input dims: {e}")))?;
            if dims.len() != 3 {
                return Err(parse_err(path, 0, "input needs three dims"));
            }
            input = Some((dims[0], dims[1], dims[2]));
        } else if let Some(rest) = line.strip_prefix("classes ") {
            classes = Some(
                rest.parse()
                    .map_err(|e| parse_err(path, 0, format!("bad class count: {e}")))?,
            );
        } else if line.starts_with("layer ") {
            layers.push(parse_layer(path, line)?);
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let mut it = rest.split_whitespace();
            let name = it
                .next()
                .ok_or_else(|| parse_err(path, 0, "tensor line missing name"))?;
            let dims: Vec<usize> = it
                .map(|v| v.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(path, 0, format!("bad tensor dims: {e}")))?;
            manifest.push((name.to_string(), dims));
        } else if let Some(rest) = line.strip_prefix("payload ") {
            payload_len = Some(
                rest.parse::<usize>()
                    .map_err(|e| parse_err(path, 0, format!("bad payload length: {e}")))?,
            );
        } else {
            return Err(parse_err(path, 0, format!("unexpected header line {line:?}")));
        }
    }

    let input = input.ok_or_else(|| parse_err(path, 0, "missing input line"))?;
    let classes = classes.ok_or_else(|| parse_err(path, 0, "missing classes line"))?;
    let payload_len = payload_len.ok_or_else(|| parse_err(path, 0, "missing payload line"))?;

    let need = header_end + payload_len + 8;
    if bytes.len() != need {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("file is {} bytes, expected {need}", bytes.len()),
        ));
    }
    let payload = &bytes[header_end..header_end + payload_len];
    let stored = u64::from_le_bytes(bytes[header_end + payload_len..].try_into().unwrap());
    if fnv1a(payload) != stored {
        return Err(Error::Checksum {
            path: path.display().to_string(),
        });
    }

    let spec = NetworkSpec::new(input, layers, classes);
    let mut offset = 0usize;
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(manifest.len());
    for (name, dims) in manifest {
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * 4;
            data.push(f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()));
        }
        offset += count * 4;
        tensors.push((name, Tensor::from_vec(dims, data)?));
    }
    if offset != payload_len {
        return Err(parse_err(
            path,
            (header_end + offset) as u64,
            "payload length disagrees with tensor manifest",
        ));
    }

    // Reassemble parameters in spec order, pulling from the manifest by name.
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> =
        tensors.into_iter().collect();
    let mut take = |name: String| -> Result<Tensor<f32>> {
        by_name
            .remove(&name)
            .ok_or_else(|| parse_err(path, 0, format!("missing tensor {name}")))
    };
    let mut params = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        params.push(match layer {
            LayerSpec::Conv { .. } => LayerParams::Conv {
                weight: take(format!("layer{i}.weight"))?,
                bias: take(format!("layer{i}.bias"))?,
            },
            LayerSpec::BatchNorm { .. } => LayerParams::BatchNorm {
                gamma: take(format!("layer{i}.gamma"))?,
                beta: take(format!("layer{i}.beta"))?,
                running_mean: take(format!("layer{i}.running_mean"))?,
                running_var: take(format!("layer{i}.running_var"))?,
            },
            _ => LayerParams::None,
        });
    }
    let net = TrainedNetwork { spec, params };
    net.validate()?;
    Ok(net)
}

fn checksum_line(body: &str) -> String {
    format!("checksum {:016x}\n", fnv1a(body.as_bytes()))
}

fn split_checksummed<'t>(path: &Path, text: &'t str) -> Result<&'t str> {
    let trimmed = text.trim_end_matches('\n');
    let (body_end, last) = match trimmed.rfind('\n') {
        Some(pos) => (pos + 1, &trimmed[pos + 1..]),
        None => (0, trimmed),
    };
    let body = &text[..body_end];
    let stored = last
        .strip_prefix("checksum ")
        .ok_or_else(|| parse_err(path, 0, "missing checksum line"))?;
    let stored = u64::from_str_radix(stored.trim(), 16)
        .map_err(|e| parse_err(path, 0, format!("bad checksum: {e}")))?;
    if fnv1a(body.as_bytes()) != stored {
        return Err(Error::Checksum {
            path: path.display().to_string(),
        });
    }
    Ok(body)
}

/// Writes an individual (with its layout) as a checksummed text file.
pub fn save_individual(ind: &Individual, path: &Path) -> Result<()> {
    let layout = ind.layout();
    let mut body = String::new();
    let _ = writeln!(body, "{INDIVIDUAL_MAGIC}");
    let _ = writeln!(body, "input_channels {}", layout.input_channels);
    for l in &layout.layers {
        let _ = writeln!(
            body,
            "layer {} {} {} {}",
            l.kernel_h,
            l.kernel_w,
            l.filters,
            if l.maskable { "maskable" } else { "fixed" }
        );
    }
    let _ = writeln!(body, "bits {}", ind.to_text());
    let mut text = body.clone();
    text.push_str(&checksum_line(&body));
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads an individual file; the layout is reconstructed from the header.
pub fn load_individual(path: &Path) -> Result<Individual> {
    let text = std::fs::read_to_string(path)?;
    let body = split_checksummed(path, &text)?;
    let mut lines = body.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != INDIVIDUAL_MAGIC {
        return Err(Error::Version {
            path: path.display().to_string(),
            found: magic.into(),
            expected: INDIVIDUAL_MAGIC.into(),
        });
    }
    let mut input_channels = None;
    let mut layers = Vec::new();
    let mut bits = None;
    for line in lines {
        if let Some(rest) = line.strip_prefix("input_channels ") {
            input_channels = Some(
                rest.parse()
                    .map_err(|e| parse_err(path, 0, format!("bad input_channels: {e}")))?,
            );
        } else if let Some(rest) = line.strip_prefix("layer ") {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(parse_err(path, 0, format!("malformed layer line {line:?}")));
            }
            let parse_num = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|e| parse_err(path, 0, format!("bad layer number: {e}")))
            };
            layers.push(MaskLayer {
                kernel_h: parse_num(fields[0])?,
                kernel_w: parse_num(fields[1])?,
                filters: parse_num(fields[2])?,
                maskable: match fields[3] {
                    "maskable" => true,
                    "fixed" => false,
                    other => {
                        return Err(parse_err(path, 0, format!("bad maskable flag {other:?}")))
                    }
                },
            });
        } else if let Some(rest) = line.strip_prefix("bits ") {
            bits = Some(rest.to_string());
        } else {
            return Err(parse_err(path, 0, format!("unexpected line {line:?}")));
        }
    }
    let layout = Arc::new(MaskLayout {
        input_channels: input_channels
            .ok_or_else(|| parse_err(path, 0, "missing input_channels"))?,
        layers,
    });
    let bits = bits.ok_or_else(|| parse_err(path, 0, "missing bits line"))?;
    Individual::from_text(layout, &bits)
}

/// Writes an evolution log as a checksummed text file.
pub fn save_log(log: &EvolutionLog, path: &Path) -> Result<()> {
    let mut body = String::new();
    let _ = writeln!(body, "{LOG_MAGIC}");
    body.push_str(&log.to_text());
    let mut text = body.clone();
    text.push_str(&checksum_line(&body));
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_log(path: &Path) -> Result<EvolutionLog> {
    let text = std::fs::read_to_string(path)?;
    let body = split_checksummed(path, &text)?;
    let mut lines = body.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != LOG_MAGIC {
        return Err(Error::Version {
            path: path.display().to_string(),
            found: magic.into(),
            expected: LOG_MAGIC.into(),
        });
    }
    let rest: String = lines.collect::<Vec<_>>().join("\n");
    EvolutionLog::parse(&rest)
}
