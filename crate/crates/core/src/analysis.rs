//! Exact compression accounting: per-layer and overall weight, multiplication
//! and feature-map ratios, table-style reports, and filter image export.
//!
//! Conventions: overall ratios are totals ratios (sum of original quantities
//! over sum of compressed quantities, never means of per-layer ratios);
//! multiplications per conv layer are `KH*KW*C*N*OH*OW`; feature-map entries
//! count conv and pooling outputs with relu/batchnorm treated as in-place;
//! memory is 4 bytes per value.

use crate::error::{Error, Result};
use crate::genome::{weight_counts, Individual, MaskLayout};
use crate::nn::{LayerParams, LayerSpec, NetworkSpec, TrainedNetwork};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Kernel/channel/filter dims of one conv layer: `(KH, KW, C, N)`.
pub type ConvDims = (usize, usize, usize, usize);

/// Per-conv-layer accounting row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    /// 1-based conv layer index.
    pub index: usize,
    pub name: String,
    pub original: ConvDims,
    pub compressed: ConvDims,
    /// Spatial output size of this conv layer.
    pub out_h: usize,
    pub out_w: usize,
    pub original_weights: usize,
    pub compressed_weights: usize,
    pub original_mults: usize,
    pub compressed_mults: usize,
    pub original_features: usize,
    pub compressed_features: usize,
    pub r_c: f64,
    pub r_s: f64,
    pub r_f: f64,
}

impl LayerStats {
    /// Derives every count and ratio from the dims.
    pub fn from_dims(
        index: usize,
        original: ConvDims,
        compressed: ConvDims,
        out_h: usize,
        out_w: usize,
    ) -> Self {
        let weights = |(kh, kw, c, n): ConvDims| kh * kw * c * n;
        let original_weights = weights(original);
        let compressed_weights = weights(compressed);
        let original_mults = original_weights * out_h * out_w;
        let compressed_mults = compressed_weights * out_h * out_w;
        let original_features = original.3 * out_h * out_w;
        let compressed_features = compressed.3 * out_h * out_w;
        LayerStats {
            index,
            name: format!("conv{index}"),
            original,
            compressed,
            out_h,
            out_w,
            original_weights,
            compressed_weights,
            original_mults,
            compressed_mults,
            original_features,
            compressed_features,
            r_c: original_weights as f64 / compressed_weights as f64,
            r_s: original_mults as f64 / compressed_mults as f64,
            r_f: original.3 as f64 / compressed.3 as f64,
        }
    }
}

/// Whole-network compression report.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub layers: Vec<LayerStats>,
    pub overall_rc: f64,
    pub overall_rs: f64,
    pub overall_rf: f64,
    pub total_original_weights: usize,
    pub total_compressed_weights: usize,
    pub total_original_mults: usize,
    pub total_compressed_mults: usize,
    /// Feature-map entries including pooling outputs.
    pub total_original_features: usize,
    pub total_compressed_features: usize,
    /// Bias and batchnorm values, reported as a footnote.
    pub extra_original_values: usize,
    pub extra_compressed_values: usize,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
}

pub const BYTES_PER_VALUE: usize = 4;
const MB: f64 = 1024.0 * 1024.0;

impl CompressionReport {
    pub fn original_weight_mb(&self) -> f64 {
        (self.total_original_weights * BYTES_PER_VALUE) as f64 / MB
    }

    pub fn compressed_weight_mb(&self) -> f64 {
        (self.total_compressed_weights * BYTES_PER_VALUE) as f64 / MB
    }

    pub fn original_feature_mb(&self) -> f64 {
        (self.total_original_features * BYTES_PER_VALUE) as f64 / MB
    }

    pub fn compressed_feature_mb(&self) -> f64 {
        (self.total_compressed_features * BYTES_PER_VALUE) as f64 / MB
    }
}

/// Ratios of conv layer `i` (1-based): `r_c = r_s =
/// (N_{i-1} N_i) / (N̂_{i-1} N̂_i)` and `r_f = N_i / N̂_i`, where `counts`
/// holds the surviving `[N̂_0 .. N̂_p]`.
pub fn layer_ratios(layout: &MaskLayout, counts: &[usize], i: usize) -> (f64, f64, f64) {
    assert!(i >= 1 && i <= layout.depth(), "layer index out of range");
    let orig_prev = if i == 1 {
        layout.input_channels
    } else {
        layout.layers[i - 2].filters
    };
    let orig = layout.layers[i - 1].filters;
    let ratio = (orig_prev * orig) as f64 / (counts[i - 1] * counts[i]) as f64;
    let rf = orig as f64 / counts[i] as f64;
    (ratio, ratio, rf)
}

/// Builds the full report for a network spec under a mask, counting weights,
/// multiplications and feature-map entries layer by layer.
pub fn overall_report(
    spec: &NetworkSpec,
    ind: &Individual,
    accuracies: Option<(f64, f64)>,
) -> Result<CompressionReport> {
    let layout = MaskLayout::from_spec(spec)?;
    if *layout != **ind.layout() {
        return Err(Error::LayoutMismatch(
            "individual layout does not match spec".into(),
        ));
    }
    let counts = ind.surviving_counts();
    let dims = spec.layer_output_dims()?;

    let mut layers = Vec::new();
    let mut conv_idx = 0usize;
    let mut total_original_features = 0usize;
    let mut total_compressed_features = 0usize;
    let mut extra_original = 0usize;
    let mut extra_compressed = 0usize;

    for (li, layer) in spec.layers.iter().enumerate() {
        let (h, w, c) = dims[li];
        match layer {
            LayerSpec::Conv { kernel_h, kernel_w, in_channels, out_filters, .. } => {
                let stats = LayerStats::from_dims(
                    conv_idx + 1,
                    (*kernel_h, *kernel_w, *in_channels, *out_filters),
                    (
                        *kernel_h,
                        *kernel_w,
                        counts[conv_idx],
                        counts[conv_idx + 1],
                    ),
                    h,
                    w,
                );
                total_original_features += stats.original_features;
                total_compressed_features += stats.compressed_features;
                extra_original += out_filters; // bias
                extra_compressed += counts[conv_idx + 1];
                layers.push(stats);
                conv_idx += 1;
            }
            LayerSpec::MaxPool { .. } => {
                total_original_features += h * w * c;
                // Channel count at this point is the surviving count of the
                // most recent conv layer.
                total_compressed_features += h * w * counts[conv_idx];
            }
            LayerSpec::BatchNorm { channels } => {
                extra_original += 4 * channels;
                extra_compressed += 4 * counts[conv_idx];
            }
            LayerSpec::Relu | LayerSpec::SoftmaxLoss => {}
        }
    }

    let total_original_weights: usize = layers.iter().map(|l| l.original_weights).sum();
    let total_compressed_weights: usize = layers.iter().map(|l| l.compressed_weights).sum();
    let total_original_mults: usize = layers.iter().map(|l| l.original_mults).sum();
    let total_compressed_mults: usize = layers.iter().map(|l| l.compressed_mults).sum();

    Ok(CompressionReport {
        layers,
        overall_rc: total_original_weights as f64 / total_compressed_weights as f64,
        overall_rs: total_original_mults as f64 / total_compressed_mults as f64,
        overall_rf: total_original_features as f64 / total_compressed_features as f64,
        total_original_weights,
        total_compressed_weights,
        total_original_mults,
        total_compressed_mults,
        total_original_features,
        total_compressed_features,
        extra_original_values: extra_original,
        extra_compressed_values: extra_compressed,
        accuracy_before: accuracies.map(|(b, _)| b),
        accuracy_after: accuracies.map(|(_, a)| a),
    })
}

fn dims_str((kh, kw, c, n): ConvDims) -> String {
    format!("{kh}x{kw}x{c}x{n}")
}

/// Human-readable aligned table in the weights/memory/new-weights style,
/// with a totals row and an extra-parameters footnote.
pub fn emit_table(report: &CompressionReport) -> String {
    let mut rows: Vec<[String; 6]> = vec![[
        "Layer".into(),
        "Num of Weights".into(),
        "Memory".into(),
        "Num of New Weights".into(),
        "Memory".into(),
        "r_c".into(),
    ]];
    for l in &report.layers {
        rows.push([
            l.name.clone(),
            dims_str(l.original),
            format!("{:.2} MB", (l.original_weights * BYTES_PER_VALUE) as f64 / MB),
            dims_str(l.compressed),
            format!("{:.2} MB", (l.compressed_weights * BYTES_PER_VALUE) as f64 / MB),
            format!("{:.2}x", l.r_c),
        ]);
    }
    rows.push([
        "Total".into(),
        report.total_original_weights.to_string(),
        format!("{:.2} MB", report.original_weight_mb()),
        report.total_compressed_weights.to_string(),
        format!("{:.2} MB", report.compressed_weight_mb()),
        format!("{:.2}x", report.overall_rc),
    ]);

    let mut widths = [0usize; 6];
    for row in &rows {
        for (wd, cell) in widths.iter_mut().zip(row) {
            *wd = (*wd).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        for (i, (cell, wd)) in row.iter().zip(&widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{cell:<wd$}");
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "Extra parameters (biases, batchnorm): {} -> {} values",
        report.extra_original_values, report.extra_compressed_values
    );
    let _ = writeln!(
        out,
        "Speed-up r_s = {:.2}x ({} -> {} multiplications)",
        report.overall_rs, report.total_original_mults, report.total_compressed_mults
    );
    let _ = writeln!(
        out,
        "Feature maps r_f = {:.2}x ({:.2} MB -> {:.2} MB)",
        report.overall_rf,
        report.original_feature_mb(),
        report.compressed_feature_mb()
    );
    if let (Some(before), Some(after)) = (report.accuracy_before, report.accuracy_after) {
        let _ = writeln!(
            out,
            "Accuracy: {:.2}% -> {:.2}%",
            before * 100.0,
            after * 100.0
        );
    }
    out
}

/// Line-delimited structured form of the report.
pub fn emit_records(report: &CompressionReport) -> String {
    let mut out = String::new();
    for l in &report.layers {
        let _ = writeln!(
            out,
            "layer={} orig={} new={} weights={} new_weights={} rc={:.6} rs={:.6} rf={:.6}",
            l.index,
            dims_str(l.original),
            dims_str(l.compressed),
            l.original_weights,
            l.compressed_weights,
            l.r_c,
            l.r_s,
            l.r_f
        );
    }
    let _ = writeln!(
        out,
        "overall rc={:.6} rs={:.6} rf={:.6} weights={} new_weights={} mults={} new_mults={} \
         features={} new_features={}",
        report.overall_rc,
        report.overall_rs,
        report.overall_rf,
        report.total_original_weights,
        report.total_compressed_weights,
        report.total_original_mults,
        report.total_compressed_mults,
        report.total_original_features,
        report.total_compressed_features
    );
    if let (Some(before), Some(after)) = (report.accuracy_before, report.accuracy_after) {
        let _ = writeln!(out, "accuracy before={before:.6} after={after:.6}");
    }
    out
}

/// Writes one 8-bit binary PGM (P5) image.
fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Exports every filter of the given conv layer (0-based index into the conv
/// chain) as min-max normalized grayscale PGM images. Multi-channel filters
/// are exported one image per channel. Returns the written paths.
pub fn export_filters(
    net: &TrainedNetwork<f32>,
    conv_index: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let conv_layers = net.spec.conv_layer_indices();
    let li = *conv_layers.get(conv_index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "conv layer {conv_index} out of range ({} conv layers)",
            conv_layers.len()
        ))
    })?;
    let LayerParams::Conv { weight, .. } = &net.params[li] else {
        unreachable!("conv layer has conv params");
    };
    let (n, c, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let area = kh * kw;
    for fi in 0..n {
        for ci in 0..c {
            let start = (fi * c + ci) * area;
            let plane = &weight.data()[start..start + area];
            let min = plane.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let pixels: Vec<u8> = if (max - min).abs() < 1e-12 {
                vec![128u8; area]
            } else {
                plane
                    .iter()
                    .map(|&v| ((v - min) / (max - min) * 255.0).round() as u8)
                    .collect()
            };
            let file = if c == 1 {
                format!("layer{}_filter{fi:03}.pgm", conv_index + 1)
            } else {
                format!("layer{}_filter{fi:03}_chan{ci:03}.pgm", conv_index + 1)
            };
            let path = dir.join(file);
            write_pgm(&path, kw, kh, &pixels)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Mean pairwise Euclidean distance between the (flattened) filters of a
/// conv layer; larger means more distinct filters.
pub fn mean_pairwise_filter_distance(net: &TrainedNetwork<f32>, conv_index: usize) -> Result<f64> {
    let conv_layers = net.spec.conv_layer_indices();
    let li = *conv_layers.get(conv_index).ok_or_else(|| {
        Error::InvalidArgument(format!("conv layer {conv_index} out of range"))
    })?;
    let LayerParams::Conv { weight, .. } = &net.params[li] else {
        unreachable!()
    };
    let n = weight.shape()[0];
    if n < 2 {
        return Ok(0.0);
    }
    let per = weight.len() / n;
    let filters: Vec<&[f32]> = weight.data().chunks_exact(per).collect();
    let mut sum = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = filters[i]
                .iter()
                .zip(filters[j])
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            sum += d.sqrt();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Cross-check helper: the overall weight ratio must equal the mask's
/// kept-weight ratio exactly.
pub fn weight_ratio_from_mask(ind: &Individual) -> f64 {
    let wc = weight_counts(ind.layout(), &ind.surviving_counts());
    wc.total as f64 / wc.kept as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::lenet_layout;
    use crate::nn::lenet_spec;
    use crate::nn::TrainedNetwork;

    fn paper_mask() -> Individual {
        let layout = lenet_layout();
        let mut bits = Vec::new();
        for (seg, keep) in layout.segments().into_iter().zip([9usize, 17, 84]) {
            for i in 0..seg.len() {
                bits.push(i < keep);
            }
        }
        Individual::from_bits(layout, bits).unwrap()
    }

    #[test]
    fn per_layer_ratios_match_arithmetic() {
        let layout = lenet_layout();
        let counts = paper_mask().surviving_counts();
        let (rc1, rs1, rf1) = layer_ratios(&layout, &counts, 1);
        assert!((rc1 - 20.0 / 9.0).abs() < 1e-12);
        assert_eq!(rc1, rs1);
        assert!((rf1 - 20.0 / 9.0).abs() < 1e-12);

        let (rc2, rs2, rf2) = layer_ratios(&layout, &counts, 2);
        assert!((rc2 - 1000.0 / 153.0).abs() < 1e-12, "rc2 {rc2}");
        assert!((rc2 - 6.536).abs() < 1e-3);
        assert_eq!(rc2, rs2);
        assert!((rf2 - 50.0 / 17.0).abs() < 1e-12);
        assert!((rf2 - 2.941).abs() < 1e-3);
    }

    #[test]
    fn uncompressed_layer_has_unit_ratios() {
        let layout = lenet_layout();
        let all = Individual::all_ones(layout.clone());
        let counts = all.surviving_counts();
        for i in 1..=4 {
            let (rc, rs, rf) = layer_ratios(&layout, &counts, i);
            assert_eq!((rc, rs, rf), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn overall_report_reproduces_published_ratios() {
        let report = overall_report(&lenet_spec(), &paper_mask(), None).unwrap();
        assert_eq!(report.total_original_weights, 430_500);
        assert_eq!(report.total_compressed_weights, 27_738);
        assert!((report.overall_rc - 15.52).abs() < 0.01, "rc {}", report.overall_rc);

        assert_eq!(report.total_original_mults, 2_293_000);
        assert_eq!(report.total_compressed_mults, 398_088);
        assert!((report.overall_rs - 5.76).abs() < 0.01, "rs {}", report.overall_rs);

        assert_eq!(report.total_original_features, 18_910);
        assert_eq!(report.total_compressed_features, 7_934);
        assert!(
            report.overall_rf > 2.35 && report.overall_rf < 2.45,
            "rf {}",
            report.overall_rf
        );
    }

    #[test]
    fn overall_rc_equals_mask_weight_ratio_exactly() {
        let report = overall_report(&lenet_spec(), &paper_mask(), None).unwrap();
        assert_eq!(report.overall_rc, weight_ratio_from_mask(&paper_mask()));
    }

    #[test]
    fn all_ones_report_is_all_unit() {
        let layout = lenet_layout();
        let report =
            overall_report(&lenet_spec(), &Individual::all_ones(layout), None).unwrap();
        assert_eq!(report.overall_rc, 1.0);
        assert_eq!(report.overall_rs, 1.0);
        assert_eq!(report.overall_rf, 1.0);
        for l in &report.layers {
            assert_eq!(l.r_c, 1.0);
            assert_eq!(l.original, l.compressed);
        }
    }

    #[test]
    fn lenet_memory_totals() {
        let report = overall_report(&lenet_spec(), &paper_mask(), None).unwrap();
        assert!((report.original_weight_mb() - 1.64).abs() < 0.01);
        assert!((report.compressed_weight_mb() - 0.106).abs() < 0.001);
        // The uncompressed feature maps occupy about 0.07 MB.
        assert!((report.original_feature_mb() - 0.072).abs() < 0.005);
    }

    #[test]
    fn multiplication_count_matches_per_pixel_oracle() {
        // Count multiplications one at a time for a small layer.
        let (kh, kw, c, n, oh, ow) = (3usize, 2usize, 4usize, 5usize, 6usize, 7usize);
        let mut counted = 0usize;
        for _oy in 0..oh {
            for _ox in 0..ow {
                for _n in 0..n {
                    for _c in 0..c {
                        for _ky in 0..kh {
                            for _kx in 0..kw {
                                counted += 1;
                            }
                        }
                    }
                }
            }
        }
        let stats = LayerStats::from_dims(1, (kh, kw, c, n), (kh, kw, c, n), oh, ow);
        assert_eq!(stats.original_mults, counted);
    }

    #[test]
    fn table_reproduces_alexnet_shaped_totals() {
        // True AlexNet-shaped dims (grouped convs have halved channels).
        let dims: [(ConvDims, usize); 8] = [
            ((11, 11, 3, 96), 1),
            ((5, 5, 48, 256), 2),
            ((3, 3, 256, 384), 3),
            ((3, 3, 192, 384), 4),
            ((3, 3, 192, 256), 5),
            ((6, 6, 256, 4096), 6),
            ((1, 1, 4096, 4096), 7),
            ((1, 1, 4096, 1000), 8),
        ];
        let layers: Vec<LayerStats> = dims
            .iter()
            .map(|&(d, i)| LayerStats::from_dims(i, d, d, 1, 1))
            .collect();
        let total: usize = layers.iter().map(|l| l.original_weights).sum();
        assert_eq!(total, 60_954_656);
        let report = CompressionReport {
            overall_rc: 1.0,
            overall_rs: 1.0,
            overall_rf: 1.0,
            total_original_weights: total,
            total_compressed_weights: total,
            total_original_mults: 0,
            total_compressed_mults: 0,
            total_original_features: 0,
            total_compressed_features: 0,
            extra_original_values: 0,
            extra_compressed_values: 0,
            accuracy_before: None,
            accuracy_after: None,
            layers,
        };
        let table = emit_table(&report);
        assert!(table.contains("60954656"), "{table}");
        assert!(table.contains("232.52 MB"), "{table}");
    }

    #[test]
    fn table_for_all_ones_mask_has_unit_column() {
        let layout = lenet_layout();
        let report =
            overall_report(&lenet_spec(), &Individual::all_ones(layout), None).unwrap();
        let table = emit_table(&report);
        // 4 layer rows + totals row + the r_s and r_f footnotes.
        assert_eq!(table.matches("1.00x").count(), 7);
        assert!(table.contains("5x5x1x20"));
    }

    #[test]
    fn export_first_layer_filters() {
        let net = TrainedNetwork::<f32>::init(lenet_spec(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_filters(&net, 0, dir.path()).unwrap();
        assert_eq!(paths.len(), 20);
        let bytes = std::fs::read(&paths[0]).unwrap();
        assert!(bytes.starts_with(b"P5\n5 5\n255\n"));
        assert_eq!(bytes.len(), b"P5\n5 5\n255\n".len() + 25);
    }

    #[test]
    fn constant_filter_exports_mid_gray() {
        use crate::nn::{LayerSpec, NetworkSpec};
        let spec = NetworkSpec::new((3, 3, 1), vec![LayerSpec::conv(3, 3, 1, 2)], 2);
        let mut net = TrainedNetwork::<f32>::init(spec, 0).unwrap();
        if let LayerParams::Conv { weight, .. } = &mut net.params[0] {
            weight.data_mut()[..9].fill(0.7);
        }
        let dir = tempfile::tempdir().unwrap();
        let paths = export_filters(&net, 0, dir.path()).unwrap();
        let bytes = std::fs::read(&paths[0]).unwrap();
        let pixels = &bytes[bytes.len() - 9..];
        assert!(pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn pairwise_distance_handles_single_filter() {
        use crate::nn::{LayerSpec, NetworkSpec};
        let spec = NetworkSpec::new(
            (3, 3, 1),
            vec![LayerSpec::conv(2, 2, 1, 1), LayerSpec::conv(2, 2, 1, 2)],
            2,
        );
        let net = TrainedNetwork::<f32>::init(spec, 0).unwrap();
        assert_eq!(mean_pairwise_filter_distance(&net, 0).unwrap(), 0.0);
    }
}
