//! On-disk formats.
//!
//! Networks are JSON documents:
//!
//! ```json
//! {"schema_version": 1, "input_shape": [2],
//!  "layers": [{"type": "dense", "weights": [[-1.7, 1.0], [2.0, -1.3]], "bias": [3, 3]},
//!             {"type": "relu"}]}
//! ```
//!
//! Dense weights are row-major (`weights[out][in]`), conv kernels are
//! `[out_channels][in_channels][kh][kw]`, and tensors are channels-first.
//!
//! Results are written either as structured JSON or as comma-separated tables
//! with a header row and 17 significant digits per value.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use crate::analysis::ClassSegment;
use crate::attributions::AttributionReport;
use crate::engine::{Endpoint, LineQuery, PartitionedLine};
use crate::error::{Error, Result};
use crate::network::{fold_affine_layers, Conv2d, Dense, Layer, Network};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDocument {
    schema_version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum LayerRecord {
    Dense {
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Conv2d {
        kernel: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Maxpool {
        window: [usize; 2],
        stride: [usize; 2],
    },
    Normalize {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Flatten {},
    Relu {},
}

fn json_error(e: serde_json::Error) -> Error {
    match e.classify() {
        Category::Io => Error::Io(e.into()),
        Category::Syntax | Category::Eof => Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
        Category::Data => Error::Schema(e.to_string()),
    }
}

fn uniform_len<T>(items: &[Vec<T>], what: &str, index: usize) -> Result<usize> {
    let len = items.first().map_or(0, Vec::len);
    if items.iter().any(|v| v.len() != len) {
        return Err(Error::Schema(format!("layers[{index}].{what}: ragged nested array")));
    }
    Ok(len)
}

fn conv_from_record(
    kernel: Vec<Vec<Vec<Vec<f64>>>>,
    bias: Vec<f64>,
    stride: [usize; 2],
    padding: [usize; 2],
    index: usize,
) -> Result<Conv2d> {
    let out_channels = kernel.len();
    let in_channels = uniform_len(&kernel, "kernel", index)?;
    let planes: Vec<&Vec<Vec<f64>>> = kernel.iter().flatten().collect();
    let kh = planes.first().map_or(0, |p| p.len());
    let rows: Vec<&Vec<f64>> = planes.iter().flat_map(|p| p.iter()).collect();
    let kw = rows.first().map_or(0, |r| r.len());
    if planes.iter().any(|p| p.len() != kh) || rows.iter().any(|r| r.len() != kw) {
        return Err(Error::Schema(format!("layers[{index}].kernel: ragged nested array")));
    }
    Ok(Conv2d {
        out_channels,
        in_channels,
        kernel_size: (kh, kw),
        kernel: rows.into_iter().flatten().copied().collect(),
        bias,
        stride: (stride[0], stride[1]),
        padding: (padding[0], padding[1]),
    })
}

fn layer_from_record(record: LayerRecord, index: usize) -> Result<Layer> {
    Ok(match record {
        LayerRecord::Dense { weights, bias } => {
            uniform_len(&weights, "weights", index)?;
            Layer::Dense(Dense::from_rows(weights, bias)?)
        }
        LayerRecord::Conv2d { kernel, bias, stride, padding } => {
            Layer::Conv2d(conv_from_record(kernel, bias, stride, padding, index)?)
        }
        LayerRecord::Maxpool { window, stride } => Layer::MaxPool {
            window: (window[0], window[1]),
            stride: (stride[0], stride[1]),
        },
        LayerRecord::Normalize { mean, std } => Layer::Normalize { mean, std },
        LayerRecord::Flatten {} => Layer::Flatten,
        LayerRecord::Relu {} => Layer::Relu,
    })
}

fn record_from_layer(layer: &Layer) -> LayerRecord {
    match layer {
        Layer::Dense(d) => LayerRecord::Dense {
            weights: d.rows().map(<[f64]>::to_vec).collect(),
            bias: d.bias.clone(),
        },
        Layer::Conv2d(c) => {
            let (kh, kw) = c.kernel_size;
            let mut values = c.kernel.iter().copied();
            let kernel = (0..c.out_channels)
                .map(|_| {
                    (0..c.in_channels)
                        .map(|_| (0..kh).map(|_| values.by_ref().take(kw).collect()).collect())
                        .collect()
                })
                .collect();
            LayerRecord::Conv2d {
                kernel,
                bias: c.bias.clone(),
                stride: [c.stride.0, c.stride.1],
                padding: [c.padding.0, c.padding.1],
            }
        }
        Layer::Normalize { mean, std } => LayerRecord::Normalize { mean: mean.clone(), std: std.clone() },
        Layer::Flatten => LayerRecord::Flatten {},
        Layer::Relu => LayerRecord::Relu {},
        Layer::MaxPool { window, stride } => LayerRecord::Maxpool {
            window: [window.0, window.1],
            stride: [stride.0, stride.1],
        },
    }
}

/// Parses and validates a network document. With `fold`, affine runs are
/// composed via [`fold_affine_layers`].
pub fn parse_network(text: &str, fold: bool) -> Result<Network> {
    let doc: NetworkDocument = serde_json::from_str(text).map_err(json_error)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "schema_version: expected {SCHEMA_VERSION}, found {}",
            doc.schema_version
        )));
    }
    let layers = doc
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            layer_from_record(r, i).map_err(|e| match e {
                Error::Shape { expected, actual, .. } => Error::Shape { layer: Some(i), expected, actual },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let net = Network::new(doc.input_shape, layers)?;
    Ok(if fold { fold_affine_layers(&net) } else { net })
}

pub fn load_network(path: &Path, fold: bool) -> Result<Network> {
    parse_network(&fs::read_to_string(path)?, fold)
}

pub fn network_to_string(net: &Network) -> String {
    let doc = NetworkDocument {
        schema_version: SCHEMA_VERSION,
        input_shape: net.input_shape().to_vec(),
        layers: net.layers().iter().map(record_from_layer).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("network documents serialize")
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, network_to_string(net))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// Self-describing JSON document.
    Structured,
    /// Comma-separated table with a header row.
    Tabular,
}

impl Format {
    /// `.json` files are structured; everything else is tabular.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Format::Structured,
            _ => Format::Tabular,
        }
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_row(out: &mut String, values: impl IntoIterator<Item = String>) {
    let row: Vec<String> = values.into_iter().collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionDocument {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    start: Vec<f64>,
    end: Vec<f64>,
    alphas: Vec<f64>,
    origin_layers: Vec<Option<usize>>,
    preimages: Vec<Vec<f64>>,
    postimages: Vec<Vec<f64>>,
}

pub fn partitions_to_string(p: &PartitionedLine, format: Format) -> String {
    let n = p.endpoints().len();
    match format {
        Format::Structured => {
            let doc = PartitionDocument {
                input_shape: p.query().start().shape().to_vec(),
                output_shape: p.endpoints()[0].postimage.shape().to_vec(),
                start: p.query().start().data().to_vec(),
                end: p.query().end().data().to_vec(),
                alphas: p.alphas(),
                origin_layers: p.endpoints().iter().map(|e| e.origin_layer).collect(),
                preimages: (0..n).map(|i| p.preimage(i).into_data()).collect(),
                postimages: p.endpoints().iter().map(|e| e.postimage.data().to_vec()).collect(),
            };
            serde_json::to_string_pretty(&doc).expect("partition documents serialize")
        }
        Format::Tabular => {
            let in_len = p.query().start().len();
            let out_len = p.endpoints()[0].postimage.len();
            let mut out = String::new();
            let header = std::iter::once("alpha".to_string())
                .chain((0..in_len).map(|i| format!("preimage_{i}")))
                .chain((0..out_len).map(|i| format!("postimage_{i}")));
            csv_row(&mut out, header);
            for (i, e) in p.endpoints().iter().enumerate() {
                let row = std::iter::once(e.alpha)
                    .chain(p.preimage(i).into_data())
                    .chain(e.postimage.data().iter().copied())
                    .map(format_value);
                csv_row(&mut out, row);
            }
            out
        }
    }
}

/// Reads a structured partition document back.
pub fn parse_partitions(text: &str) -> Result<PartitionedLine> {
    let doc: PartitionDocument = serde_json::from_str(text).map_err(json_error)?;
    let query = LineQuery::new(
        Tensor::new(doc.input_shape.clone(), doc.start)?,
        Tensor::new(doc.input_shape, doc.end)?,
    )?;
    if doc.alphas.len() != doc.postimages.len() || doc.alphas.len() != doc.origin_layers.len() {
        return Err(Error::Schema("alphas, origin_layers and postimages differ in length".into()));
    }
    let endpoints = doc
        .alphas
        .into_iter()
        .zip(doc.postimages)
        .zip(doc.origin_layers)
        .map(|((alpha, post), origin_layer)| {
            Ok(Endpoint {
                alpha,
                postimage: Tensor::new(doc.output_shape.clone(), post)?,
                origin_layer,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PartitionedLine::new(query, endpoints)
}

pub fn segments_to_string(segments: &[ClassSegment], format: Format) -> String {
    match format {
        Format::Structured => serde_json::to_string_pretty(segments).expect("segments serialize"),
        Format::Tabular => {
            let mut out = String::from("alpha_lo,alpha_hi,class\n");
            for s in segments {
                let _ = writeln!(out, "{},{},{}", format_value(s.alpha_lo), format_value(s.alpha_hi), s.class_index);
            }
            out
        }
    }
}

/// Class segments of many lines; the tabular form prefixes each row with the line number.
pub fn sweep_to_string(lines: &[Vec<ClassSegment>], format: Format) -> String {
    match format {
        Format::Structured => {
            #[derive(Serialize)]
            struct Entry<'a> {
                line: usize,
                segments: &'a [ClassSegment],
            }
            let entries: Vec<Entry> = lines
                .iter()
                .enumerate()
                .map(|(line, segments)| Entry { line, segments })
                .collect();
            serde_json::to_string_pretty(&entries).expect("segments serialize")
        }
        Format::Tabular => {
            let mut out = String::from("line,alpha_lo,alpha_hi,class\n");
            for (i, segs) in lines.iter().enumerate() {
                for s in segs {
                    let _ = writeln!(
                        out,
                        "{i},{},{},{}",
                        format_value(s.alpha_lo),
                        format_value(s.alpha_hi),
                        s.class_index
                    );
                }
            }
            out
        }
    }
}

pub fn attribution_to_string(report: &AttributionReport, format: Format) -> String {
    match format {
        Format::Structured => serde_json::to_string_pretty(report).expect("reports serialize"),
        Format::Tabular => {
            let mut out = String::from("dimension,attribution\n");
            for (i, v) in report.values.iter().enumerate() {
                let _ = writeln!(out, "{i},{}", format_value(*v));
            }
            out
        }
    }
}

pub fn export_partitions(p: &PartitionedLine, path: &Path, format: Format) -> Result<()> {
    fs::write(path, partitions_to_string(p, format))?;
    Ok(())
}

pub fn export_segments(segments: &[ClassSegment], path: &Path, format: Format) -> Result<()> {
    fs::write(path, segments_to_string(segments, format))?;
    Ok(())
}

/// Serializes any report type as a structured document.
pub fn export_report<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report).expect("reports serialize"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::exactline_network;

    const LOAN: &str = r#"{"schema_version": 1, "input_shape": [2], "layers": [
        {"type": "dense", "weights": [[-1.7, 1.0], [2.0, -1.3]], "bias": [3, 3]},
        {"type": "relu"}]}"#;

    #[test]
    fn loads_loan_network() {
        let net = parse_network(LOAN, false).unwrap();
        assert_eq!(net.layers().len(), 2);
        let Layer::Dense(d) = &net.layers()[0] else { panic!() };
        assert_eq!(d.weights, vec![-1.7, 1.0, 2.0, -1.3]);
    }

    #[test]
    fn unknown_layer_is_schema_error() {
        let text = r#"{"schema_version": 1, "input_shape": [2], "layers": [{"type": "gelu"}]}"#;
        assert_eq!(parse_network(text, false).unwrap_err().code(), "schema-error");
    }

    #[test]
    fn unknown_field_and_version_rejected() {
        let text = r#"{"schema_version": 1, "input_shape": [2], "layers": [{"type": "relu", "alpha": 1}]}"#;
        assert_eq!(parse_network(text, false).unwrap_err().code(), "schema-error");
        let text = r#"{"schema_version": 2, "input_shape": [2], "layers": [{"type": "relu"}]}"#;
        assert_eq!(parse_network(text, false).unwrap_err().code(), "schema-error");
    }

    #[test]
    fn bias_mismatch_is_shape_error() {
        let text = r#"{"schema_version": 1, "input_shape": [2], "layers": [
            {"type": "dense", "weights": [[1, 0], [0, 1]], "bias": [0, 0, 0]}]}"#;
        let err = parse_network(text, false).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: Some(0), .. }), "{err:?}");
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_network("{\n  \"schema_version\": 1,\n  oops", false).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fold_flag_collapses_normalize() {
        let text = r#"{"schema_version": 1, "input_shape": [2], "layers": [
            {"type": "normalize", "mean": [1, 2], "std": [2, 4]},
            {"type": "dense", "weights": [[1, 1]], "bias": [0]}]}"#;
        assert_eq!(parse_network(text, false).unwrap().layers().len(), 2);
        assert_eq!(parse_network(text, true).unwrap().layers().len(), 1);
    }

    #[test]
    fn conv_round_trip() {
        let text = r#"{"schema_version": 1, "input_shape": [1, 3, 3], "layers": [
            {"type": "conv2d", "kernel": [[[[1, 2], [3, 4]]], [[[0.5, -1], [2, 0]]]],
             "bias": [0.1, -0.2], "stride": [1, 1], "padding": [1, 0]},
            {"type": "relu"}, {"type": "maxpool", "window": [2, 2], "stride": [1, 1]},
            {"type": "flatten"}]}"#;
        let net = parse_network(text, false).unwrap();
        assert_eq!(net.output_shape(), &[6]);
        let again = parse_network(&network_to_string(&net), false).unwrap();
        assert_eq!(again, net);
    }

    #[test]
    fn loan_tabular_has_four_rows() {
        let net = parse_network(LOAN, false).unwrap();
        let q = LineQuery::new(
            Tensor::vector(vec![20.0, 30.0]).unwrap(),
            Tensor::vector(vec![30.0, 50.0]).unwrap(),
        )
        .unwrap();
        let p = exactline_network(&net, &q).unwrap();
        let csv = partitions_to_string(&p, Format::Tabular);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "alpha,preimage_0,preimage_1,postimage_0,postimage_1");
        let alpha: f64 = lines[2].split(',').next().unwrap().parse().unwrap();
        assert_eq!(alpha, p.endpoints()[1].alpha);

        let back = parse_partitions(&partitions_to_string(&p, Format::Structured)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn format_value_round_trips() {
        for v in [1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.1 + 0.2, f64::MIN_POSITIVE] {
            let s = format_value(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn single_segment_table_has_one_row() {
        let segs = [ClassSegment { alpha_lo: 0.0, alpha_hi: 1.0, class_index: 0 }];
        assert_eq!(segments_to_string(&segs, Format::Tabular).lines().count(), 2);
    }
}
