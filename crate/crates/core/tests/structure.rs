//! Shapes, parameter layout and identity behaviour of the assembled network.

mod common;

use common::*;
use dpm::blocks::{gdfn_hidden, Mdta};
use dpm::image_ops::split_patches;
use dpm::init::{InitScheme, ParamInit};
use dpm::model::{DpmFormer, ModelConfig, PatchAxis};
use dpm::unet::{FinalWidth, UNet, UNetConfig};
use dpm::Error;
use dpm_tensor::{Module, Tensor};

#[test]
fn unet_channel_ladder_and_deepest_extent() {
    for (c, fw, last) in [(8, FinalWidth::Base, 8), (8, FinalWidth::Double, 16)] {
        let cfg = UNetConfig {
            base_channels: c,
            blocks_per_level: [1, 1, 1],
            final_width: fw,
            ..Default::default()
        };
        let unet = UNet::<f32>::new(&ParamInit::new(0, InitScheme::default()), &cfg).unwrap();
        let x = Tensor::<f32>::zeros(&[2, c, 16, 24]);
        let (out, trace) = unet.forward_traced(&x).unwrap();
        let shapes: Vec<&[usize]> = trace.iter().map(|t| t.shape()).collect();
        assert_eq!(
            shapes,
            [
                &[2, c, 16, 24][..],
                &[2, 2 * c, 8, 12],
                &[2, 4 * c, 4, 6],
                &[2, 2 * c, 8, 12],
                &[2, last, 16, 24]
            ]
        );
        assert_eq!(out.shape(), &[2, last, 16, 24]);
        assert_eq!(cfg.out_channels(), last);
    }
}

#[test]
fn zero_parameter_model_is_the_identity() {
    for axis in [PatchAxis::Height, PatchAxis::Width] {
        let cfg = ModelConfig {
            patch_axis: axis,
            ..tiny_model_config(4)
        };
        let m = DpmFormer::<f64>::new(&ParamInit::new(0, InitScheme::ZeroWeights), &cfg).unwrap();
        let x = rand_tensor(&[1, 3, 32, 48], 1);
        let out = m.forward(&x).unwrap();
        assert_eq!(out.derained.to_vec(), x.to_vec());
        assert!(out.residual.to_vec().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn every_supervised_output_has_its_target_extent() {
    let m = model(&tiny_model_config(4), 3);
    let x = Tensor::<f32>::zeros(&[2, 3, 32, 64]);
    let out = m.forward(&x).unwrap();
    assert_eq!(out.derained.shape(), &[2, 3, 32, 64]);
    assert_eq!(out.fused_input.shape(), &[2, 3, 32, 64]);
    assert_eq!(out.mp_level2.unwrap().shape(), &[2, 3, 32, 64]);
    let h3 = out.mp_level3.unwrap();
    assert_eq!((h3.rows, h3.cols), (2, 2));
    let tiles = split_patches(&x, 2, 2).unwrap();
    for (a, b) in h3.patches.iter().zip(&tiles.patches) {
        assert_eq!(a.shape(), b.shape());
    }
    assert_eq!(out.c2f_half.unwrap().shape(), &[2, 3, 16, 32]);
    assert_eq!(out.c2f_quarter.unwrap().shape(), &[2, 3, 8, 16]);
}

#[test]
fn disabling_a_path_removes_its_outputs_and_parameters() {
    let full = model(&tiny_model_config(4), 0);
    let variants = [(true, false), (false, true), (false, false)];
    for (mp, c2f) in variants {
        let cfg = ModelConfig {
            enable_multipatch: mp,
            enable_coarse2fine: c2f,
            ..tiny_model_config(4)
        };
        let m = model(&cfg, 0);
        assert!(m.parameter_count() < full.parameter_count());
        let out = m.forward(&Tensor::<f32>::zeros(&[1, 3, 16, 16])).unwrap();
        assert_eq!(out.mp_level2.is_some(), mp);
        assert_eq!(out.mp_level3.is_some(), mp);
        assert_eq!(out.c2f_half.is_some(), c2f);
        assert_eq!(out.c2f_quarter.is_some(), c2f);
    }
}

#[test]
fn per_patch_weights_multiply_branch_parameters() {
    let shared = model(&tiny_model_config(4), 0);
    let separate = model(
        &ModelConfig {
            share_level_weights: false,
            ..tiny_model_config(4)
        },
        0,
    );
    assert!(separate.parameter_count() > shared.parameter_count());
    let names: Vec<String> = separate
        .parameters()
        .iter()
        .map(|p| p.name().to_string())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("mp.level3.patch3.")));
    assert!(names.iter().any(|n| n.starts_with("mp.level2.patch1.")));
}

#[test]
fn parameter_names_are_unique_and_hierarchical() {
    let m = model(&tiny_model_config(4), 0);
    let mut names: Vec<String> = m
        .parameters()
        .iter()
        .map(|p| p.name().to_string())
        .collect();
    assert!(names
        .iter()
        .any(|n| n == "backbone.unet.enc1.block0.mdta.alpha"));
    assert!(names.iter().any(|n| n.starts_with("c2f.quarter.")));
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
}

#[test]
fn attention_is_channel_by_channel_and_row_stochastic() {
    let (c, heads) = (8, 2);
    let mdta = Mdta::<f64>::new(&ParamInit::new(0, InitScheme::default()), c, heads, true).unwrap();
    let x = rand_tensor(&[2, c, 6, 5], 4);
    let (out, attn) = mdta.forward_with_attention(&x).unwrap();
    assert_eq!(out.shape(), x.shape());
    let d = c / heads;
    assert_eq!(attn.shape(), &[2, heads, d, d]);
    for row in attn.to_f64_vec().chunks(d) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn head_count_must_divide_width() {
    assert!(matches!(
        Mdta::<f32>::new(&ParamInit::new(0, InitScheme::default()), 6, 4, true),
        Err(Error::Config(_))
    ));
    let cfg = ModelConfig {
        backbone: UNetConfig {
            base_channels: 6,
            heads_per_level: [1, 2, 5],
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(matches!(
        DpmFormer::<f32>::new(&ParamInit::new(0, InitScheme::default()), &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn feed_forward_width_rounds_the_expansion() {
    assert_eq!(gdfn_hidden(48, 2.66), 128);
    assert_eq!(gdfn_hidden(96, 2.66), 255);
    assert_eq!(gdfn_hidden(16, 2.66), 43);
}

#[test]
fn inputs_must_be_rgb_multiples_of_sixteen() {
    let m = model(&tiny_model_config(4), 0);
    assert!(m.forward(&Tensor::<f32>::zeros(&[1, 3, 24, 32])).is_err());
    assert!(m.forward(&Tensor::<f32>::zeros(&[1, 1, 32, 32])).is_err());
}
