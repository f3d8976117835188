//! Static cost accounting: per-layer parameter and FLOP counts derived by
//! walking the exact layer sequence the forward pass executes.
//!
//! The counts follow `FLOP_CONVENTION`. Anything the convention declares
//! free (shifts, permutes, concatenation, residual adds, padding) still
//! gets a row when it is a named layer, so reports make the zero-cost
//! structure visible instead of hiding it.

use crate::error::{Error, Result};
use crate::network::{
    dec_block_shape, enc_block_shape, param_specs, validate_input_shape, UNetConfig,
};

/// The accounting rules every number in this module follows.
pub const FLOP_CONVENTION: &str = "1 MAC = 2 FLOPs; a conv bias adds 1 FLOP per output element; normalization and activation cost 2 FLOPs per element; residual adds, slice shifts, view permutes, concatenation, and padding are free";

#[derive(Debug, Clone)]
pub struct CostRow {
    pub layer: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

/// Total learnable scalars, straight off the parameter list.
pub fn count_params(cfg: &UNetConfig) -> u64 {
    param_specs(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>() as u64)
        .sum()
}

struct Walk {
    rows: Vec<CostRow>,
}

impl Walk {
    fn conv(
        &mut self,
        name: String,
        b_eff: u64,
        out_voxels: u64,
        cin: u64,
        cout: u64,
        kvol: u64,
        bias: bool,
    ) {
        let macs = out_voxels * b_eff * cout * cin * kvol;
        let out_elems = out_voxels * b_eff * cout;
        self.rows.push(CostRow {
            layer: name,
            params: cin * cout * kvol + if bias { cout } else { 0 },
            flops: 2 * macs + if bias { out_elems } else { 0 },
        });
    }

    /// Transposed conv with kernel == stride: each output element takes
    /// exactly one kernel tap, so MACs = out_voxels * cin per channel.
    fn up(&mut self, name: String, b_eff: u64, out_voxels: u64, cin: u64, cout: u64, kvol: u64) {
        let macs = out_voxels * b_eff * cout * cin;
        self.rows.push(CostRow {
            layer: name,
            params: cin * cout * kvol,
            flops: 2 * macs,
        });
    }

    fn norm(&mut self, name: String, b_eff: u64, voxels: u64, channels: u64) {
        self.rows.push(CostRow {
            layer: name,
            params: 2 * channels,
            flops: 2 * b_eff * channels * voxels,
        });
    }

    fn act(&mut self, name: String, b_eff: u64, voxels: u64, channels: u64) {
        self.rows.push(CostRow {
            layer: name,
            params: 0,
            flops: 2 * b_eff * channels * voxels,
        });
    }

    fn free(&mut self, name: String) {
        self.rows.push(CostRow { layer: name, params: 0, flops: 0 });
    }

    /// One residual block: optional shift, two convs with norms and
    /// activations, optional projection, and the post-add activation.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        prefix: &str,
        b_eff: u64,
        out_voxels: u64,
        cin: u64,
        cout: u64,
        kvol: u64,
        shift: bool,
        projection: bool,
    ) {
        if shift {
            self.free(format!("{}.shift", prefix));
        }
        self.conv(format!("{}.conv1", prefix), b_eff, out_voxels, cin, cout, kvol, false);
        self.norm(format!("{}.norm1", prefix), b_eff, out_voxels, cout);
        self.act(format!("{}.act1", prefix), b_eff, out_voxels, cout);
        self.conv(format!("{}.conv2", prefix), b_eff, out_voxels, cout, cout, kvol, false);
        self.norm(format!("{}.norm2", prefix), b_eff, out_voxels, cout);
        if projection {
            self.conv(format!("{}.skip.conv", prefix), b_eff, out_voxels, cin, cout, 1, false);
            self.norm(format!("{}.skip.norm", prefix), b_eff, out_voxels, cout);
        }
        self.act(format!("{}.act2", prefix), b_eff, out_voxels, cout);
    }
}

/// Per-layer costs of one forward pass over a `[b, x, y, z]` input volume.
/// The multi-view variant runs its body at batch 3b; the fused head runs
/// at batch b.
pub fn cost_report(cfg: &UNetConfig, input: [usize; 4]) -> Result<CostReport> {
    cfg.validate()?;
    let [b, x, y, z] = input;
    validate_input_shape(cfg, &[b, cfg.in_channels, x, y, z])?;

    let n = cfg.stage_widths.len();
    let w = &cfg.stage_widths;
    let kernel = cfg.variant.kernel();
    let kvol = (kernel.0 * kernel.1 * kernel.2) as u64;
    let down = cfg.variant.down_stride();
    let down_vol = (down.0 * down.1 * down.2) as u64;
    let shift = cfg.variant.uses_shift() && !cfg.shift_fraction.is_zero();
    let b_body = if cfg.variant.multi_view() { 3 * b as u64 } else { b as u64 };

    let mut walk = Walk { rows: Vec::new() };
    if cfg.variant.multi_view() {
        walk.free("multi_view.create".to_string());
    }

    // Encoder: extents shrink at every stage after the first.
    let mut ext = (x, y, z);
    let mut enc_exts = Vec::with_capacity(n);
    for i in 0..n {
        let shape = enc_block_shape(cfg, i);
        if i > 0 {
            ext = (ext.0 / down.0, ext.1 / down.1, ext.2 / down.2);
        }
        enc_exts.push(ext);
        let voxels = (ext.0 * ext.1 * ext.2) as u64;
        walk.block(
            &format!("enc{}", i),
            b_body,
            voxels,
            shape.in_channels as u64,
            shape.out_channels as u64,
            kvol,
            shift,
            shape.needs_projection(),
        );
    }

    // Decoder: upsample, concatenate the encoder skip (free), block.
    for i in (0..n - 1).rev() {
        let out_ext = enc_exts[i];
        let voxels = (out_ext.0 * out_ext.1 * out_ext.2) as u64;
        walk.up(
            format!("dec{}.up", i),
            b_body,
            voxels,
            w[i + 1] as u64,
            w[i] as u64,
            down_vol,
        );
        walk.free(format!("dec{}.concat", i));
        let shape = dec_block_shape(cfg, i);
        walk.block(
            &format!("dec{}.block", i),
            b_body,
            voxels,
            shape.in_channels as u64,
            shape.out_channels as u64,
            kvol,
            shift,
            shape.needs_projection(),
        );
    }

    // Head at the original batch; the multi-view sum is free.
    if cfg.variant.multi_view() {
        walk.free("multi_view.fuse".to_string());
    }
    let voxels = (x * y * z) as u64;
    let w0 = w[0] as u64;
    walk.conv("head.conv1".to_string(), b as u64, voxels, w0, w0, 1, true);
    walk.act("head.act".to_string(), b as u64, voxels, w0);
    walk.conv(
        "head.conv2".to_string(),
        b as u64,
        voxels,
        w0,
        cfg.num_classes as u64,
        1,
        true,
    );

    let total_params = walk.rows.iter().map(|r| r.params).sum();
    let total_flops = walk.rows.iter().map(|r| r.flops).sum();
    Ok(CostReport { rows: walk.rows, total_params, total_flops })
}

/// Renders a report as CSV: a convention comment, a `layer,params,flops`
/// header, one row per layer, totals last.
pub fn to_csv(report: &CostReport) -> String {
    let mut s = format!("# {}\n", FLOP_CONVENTION);
    s.push_str("layer,params,flops\n");
    for row in &report.rows {
        s.push_str(&format!("{},{},{}\n", row.layer, row.params, row.flops));
    }
    s.push_str(&format!("total,{},{}\n", report.total_params, report.total_flops));
    s
}

/// Side-by-side totals for several configurations over one input. The
/// `dsc` column is a placeholder for measured scores from evaluation runs
/// and is left blank here.
pub fn efficiency_table(entries: &[(String, UNetConfig)], input: [usize; 4]) -> Result<String> {
    let mut s = String::from("config,params,flops,dsc\n");
    for (name, cfg) in entries {
        let report = cost_report(cfg, input)?;
        s.push_str(&format!("{},{},{},\n", name, report.total_params, report.total_flops));
    }
    Ok(s)
}

/// Finds one report row by layer name.
pub fn row<'a>(report: &'a CostReport, layer: &str) -> Result<&'a CostRow> {
    report
        .rows
        .iter()
        .find(|r| r.layer == layer)
        .ok_or_else(|| Error::argument(format!("no cost row named `{}`", layer)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ShiftPlacement, ShiftSpec};
    use crate::network::{SshUnet, Variant};

    fn cfg(variant: Variant, widths: &[usize]) -> UNetConfig {
        UNetConfig {
            variant,
            in_channels: 1,
            num_classes: 3,
            stage_widths: widths.to_vec(),
            shift_fraction: ShiftSpec::quarter(),
            shift_placement: ShiftPlacement::PreConv,
        }
    }

    #[test]
    fn static_param_count_matches_built_network_exactly() {
        for variant in Variant::all() {
            for widths in [vec![4, 8], vec![3, 5, 7]] {
                let c = cfg(variant, &widths);
                let net = SshUnet::build(c.clone(), 0).unwrap();
                assert_eq!(
                    count_params(&c),
                    net.params.total_scalars() as u64,
                    "{} {:?}",
                    variant.as_str(),
                    widths
                );
            }
        }
    }

    #[test]
    fn report_rows_account_for_every_parameter() {
        for variant in Variant::all() {
            let c = cfg(variant, &[4, 8, 16]);
            let report = cost_report(&c, [1, 16, 16, 16]).unwrap();
            assert_eq!(report.total_params, count_params(&c), "{}", variant.as_str());
        }
    }

    #[test]
    fn planar_variants_cost_identical_params() {
        let p = count_params(&cfg(Variant::Plain2d, &[4, 8]));
        let s = count_params(&cfg(Variant::Shift2d, &[4, 8]));
        let m = count_params(&cfg(Variant::Shift2dMultiView, &[4, 8]));
        assert_eq!(p, s);
        assert_eq!(p, m);
    }

    #[test]
    fn shift_adds_no_flops() {
        let plain = cost_report(&cfg(Variant::Plain2d, &[4, 8]), [1, 8, 8, 8]).unwrap();
        let shifted = cost_report(&cfg(Variant::Shift2d, &[4, 8]), [1, 8, 8, 8]).unwrap();
        assert_eq!(plain.total_flops, shifted.total_flops);
        // The shift rows exist and are visibly free.
        let r = row(&shifted, "enc0.shift").unwrap();
        assert_eq!((r.params, r.flops), (0, 0));
        assert!(row(&plain, "enc0.shift").is_err());
    }

    #[test]
    fn flops_scale_linearly_per_axis() {
        let c = cfg(Variant::Plain2d, &[4, 8]);
        let base = cost_report(&c, [1, 8, 8, 8]).unwrap();
        let tall = cost_report(&c, [1, 16, 8, 8]).unwrap();
        let wide = cost_report(&c, [1, 8, 16, 8]).unwrap();
        let batch = cost_report(&c, [2, 8, 8, 8]).unwrap();
        assert_eq!(tall.total_flops, 2 * base.total_flops);
        assert_eq!(wide.total_flops, 2 * base.total_flops);
        assert_eq!(batch.total_flops, 2 * base.total_flops);
        assert_eq!(tall.total_params, base.total_params);
    }

    #[test]
    fn multi_view_triples_body_cost_but_not_head() {
        let plain = cost_report(&cfg(Variant::Plain2d, &[4, 8]), [1, 8, 8, 8]).unwrap();
        let multi =
            cost_report(&cfg(Variant::Shift2dMultiView, &[4, 8]), [1, 8, 8, 8]).unwrap();
        let head = |r: &CostReport| {
            r.rows
                .iter()
                .filter(|row| row.layer.starts_with("head."))
                .map(|row| row.flops)
                .sum::<u64>()
        };
        let (hp, hm) = (head(&plain), head(&multi));
        assert_eq!(hp, hm, "head cost should not depend on the view count");
        assert_eq!(multi.total_flops - hm, 3 * (plain.total_flops - hp));
        assert_eq!(multi.total_params, plain.total_params);
    }

    #[test]
    fn isotropic_kernel_triples_conv_flops_at_equal_output_shape() {
        // enc0 runs at stride 1 in both variants, so its output shape is
        // the input shape; the only difference is kernel volume 27 vs 9.
        let planar = cost_report(&cfg(Variant::Plain2d, &[4, 8]), [1, 8, 8, 8]).unwrap();
        let full = cost_report(&cfg(Variant::Full3d, &[4, 8]), [1, 8, 8, 8]).unwrap();
        for layer in ["enc0.conv1", "enc0.conv2"] {
            assert_eq!(
                row(&full, layer).unwrap().flops,
                3 * row(&planar, layer).unwrap().flops,
                "{}",
                layer
            );
        }
    }

    #[test]
    fn csv_layout_is_stable() {
        let report = cost_report(&cfg(Variant::Shift2d, &[4, 8]), [1, 8, 8, 8]).unwrap();
        let csv = to_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# 1 MAC = 2 FLOPs"));
        assert_eq!(lines[1], "layer,params,flops");
        assert!(lines.last().unwrap().starts_with("total,"));
        assert_eq!(lines.len(), report.rows.len() + 3);
    }

    #[test]
    fn efficiency_table_lists_each_config() {
        let entries = vec![
            ("plain2d".to_string(), cfg(Variant::Plain2d, &[4, 8])),
            ("shift2d".to_string(), cfg(Variant::Shift2d, &[4, 8])),
        ];
        let table = efficiency_table(&entries, [1, 8, 8, 8]).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "config,params,flops,dsc");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("plain2d,"));
        assert!(lines[1].ends_with(','), "dsc column should be blank");
    }

    #[test]
    fn upsample_cost_matches_hand_count() {
        // dec0.up for widths [4, 8] planar on 8x8x8: bottom is 8x4x4, the
        // output is 8x8x8 with 4 channels; each output element takes one
        // kernel tap over 8 input channels. MACs = 512*4*8, FLOPs double.
        let report = cost_report(&cfg(Variant::Plain2d, &[4, 8]), [1, 8, 8, 8]).unwrap();
        let r = row(&report, "dec0.up").unwrap();
        assert_eq!(r.flops, 2 * 512 * 4 * 8);
        assert_eq!(r.params, 8 * 4 * 4); // [8, 4, 1, 2, 2]
    }
}
