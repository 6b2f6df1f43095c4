mod common;

use common::{loss_and_grads, random_stack, rel_diff};
use geocross::bands::{BandId, ChannelStack};
use geocross::numeric::Tape;
use geocross::vit::{
    cls_representation, spatial_feature_maps, Backbone, ChannelVit, EncodeOptions, TokenMeta, VitConfig,
};

fn small_vit(shared: bool) -> ChannelVit {
    let cfg = VitConfig {
        image_size: 32,
        patch: 8,
        dim: 16,
        depth: 3,
        heads: 2,
        mlp_ratio: 2,
        shared_projection: shared,
        ..Default::default()
    };
    ChannelVit::new(cfg, 4).unwrap()
}

/// CLS vector and the four spatial maps, flattened.
fn features(model: &ChannelVit, stack: &ChannelStack) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let enc = model.encode(&mut tape, &bound, stack, &EncodeOptions::default()).unwrap();
    let cls = cls_representation(&mut tape, &enc).unwrap();
    let maps = spatial_feature_maps(&mut tape, &enc, &[0, 1, 2, 3]).unwrap();
    let spatial = maps.iter().flat_map(|&m| tape.value(m).data().to_vec()).collect();
    (tape.value(cls).data().to_vec(), spatial)
}

#[test]
fn token_count_is_channels_times_patches_plus_one() {
    let model = small_vit(true);
    for size in [16, 32] {
        let np = (size / 8) * (size / 8);
        for c in [1, 2, 3, 10, 12] {
            let stack = random_stack(&BandId::ALL[..c], size, c as u64);
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, false);
            let seq = model.tokenize(&mut tape, &bound, &stack, &EncodeOptions::default()).unwrap();
            assert_eq!(seq.len(), c * np + 1, "C={c} size={size}");
            assert_eq!(tape.value(seq.tokens).shape(), [c * np + 1, 16]);
            assert_eq!(seq.meta[0], TokenMeta::Cls);
            // block layout: every band's N_p tokens are contiguous, in raster order
            for (i, &b) in stack.bands.iter().enumerate() {
                for j in 0..np {
                    assert_eq!(seq.meta[1 + i * np + j], TokenMeta::Patch { band: Some(b), spatial: j });
                }
            }
            let enc = model.encode(&mut tape, &bound, &stack, &EncodeOptions::default()).unwrap();
            assert_eq!(enc.num_tokens(), c * np + 1);
        }
    }
}

#[test]
fn features_are_invariant_to_channel_order() {
    let model = small_vit(true);
    let bands = [BandId::B2, BandId::B3, BandId::B4, BandId::B8, BandId::VV, BandId::VH];
    let stack = random_stack(&bands, 32, 21);
    let (cls, spatial) = features(&model, &stack);
    for order in [[5, 4, 3, 2, 1, 0], [2, 0, 4, 1, 5, 3], [1, 0, 2, 3, 4, 5]] {
        let (pc, ps) = features(&model, &stack.permuted(&order));
        assert!(rel_diff(&cls, &pc) < 1e-6, "cls differs under {order:?}");
        assert!(rel_diff(&spatial, &ps) < 1e-6, "spatial maps differ under {order:?}");
    }
}

#[test]
fn per_band_projection_is_also_order_invariant() {
    let model = small_vit(false);
    let stack = random_stack(&[BandId::B4, BandId::B11, BandId::VH], 16, 8);
    let (cls, spatial) = features(&model, &stack);
    let (pc, ps) = features(&model, &stack.permuted(&[2, 0, 1]));
    assert!(rel_diff(&cls, &pc) < 1e-6);
    assert!(rel_diff(&spatial, &ps) < 1e-6);
}

#[test]
fn shared_projection_is_one_matrix_for_all_bands() {
    let model = small_vit(true);
    assert_eq!(model.params().get("tok.proj").unwrap().shape(), [64, 16]);
    assert_eq!(small_vit(false).params().get("tok.proj").unwrap().shape(), [64 * 12, 16]);

    // Two bands carrying the same plane differ only by their channel embeddings.
    let a = random_stack(&[BandId::B2], 16, 1);
    let stack = ChannelStack::new(vec![BandId::B2, BandId::VV], 16, 16, vec![a.planes[0].clone(); 2]).unwrap();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let seq = model.tokenize(&mut tape, &bound, &stack, &EncodeOptions::default()).unwrap();
    let t = tape.value(seq.tokens);
    let chn = model.params().get("tok.chn").unwrap();
    let np = 4;
    for j in 0..np {
        for k in 0..16 {
            let diff = t.row(1 + np + j)[k] - t.row(1 + j)[k];
            let want = chn.row(BandId::VV.index())[k] - chn.row(BandId::B2.index())[k];
            assert!((diff - want).abs() < 1e-12);
        }
    }
}

#[test]
fn absent_bands_get_no_channel_embedding_gradient() {
    let model = small_vit(true);
    let present = [BandId::B3, BandId::B8A, BandId::VH];
    let stack = random_stack(&present, 16, 2);
    let (_, grads) = loss_and_grads(model.params(), |tape, b| {
        let enc = model.encode(tape, b, &stack, &EncodeOptions::default())?;
        let c = cls_representation(tape, &enc)?;
        let c = tape.gelu(c);
        Ok(tape.sum(c))
    })
    .unwrap();
    let g = &grads["tok.chn"];
    for b in BandId::ALL {
        let norm: f64 = g.row(b.index()).iter().map(|v| v.abs()).sum();
        if present.contains(&b) {
            assert!(norm > 0.0, "{b} should receive gradient");
        } else {
            assert_eq!(norm, 0.0, "{b} is absent but has gradient");
        }
    }
}
