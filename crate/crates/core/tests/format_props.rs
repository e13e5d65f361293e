//! Property tests for the byte-level formats.

use drnet::{decode_image, decode_model, encode_image, parse_manifest, resize_bilinear, Image};
use proptest::prelude::*;

fn arb_image() -> impl Strategy<Value = Image> {
    (1usize..10, 1usize..10, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(
        |(w, h, ch)| {
            proptest::collection::vec(any::<u8>(), w * h * ch)
                .prop_map(move |data| Image::new(w, h, ch, data).unwrap())
        },
    )
}

proptest! {
    #[test]
    fn image_roundtrip_is_exact(img in arb_image()) {
        let bytes = encode_image(&img);
        let back = decode_image(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_image(&back), bytes);
    }

    #[test]
    fn resize_output_stays_inside_input_range(
        img in arb_image(),
        ow in 1usize..12,
        oh in 1usize..12,
    ) {
        let out = resize_bilinear(&img, ow, oh).unwrap();
        let lo = *img.data().iter().min().unwrap();
        let hi = *img.data().iter().max().unwrap();
        for &v in out.data() {
            prop_assert!(v >= lo && v <= hi, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn resize_to_same_size_is_identity(img in arb_image()) {
        let out = resize_bilinear(&img, img.width(), img.height()).unwrap();
        prop_assert_eq!(out, img);
    }

    #[test]
    fn image_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_image(&bytes);
    }

    #[test]
    fn model_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        prop_assert!(decode_model(&bytes).is_err());
    }

    #[test]
    fn manifest_roundtrip(
        rows in proptest::collection::vec(("[a-z]{1,8}", 0usize..8), 1..20)
    ) {
        // Unique paths; keep label in range.
        let mut text = String::from("path,label\n");
        let mut seen = std::collections::HashSet::new();
        let mut used = Vec::new();
        for (i, (name, label)) in rows.iter().enumerate() {
            let path = format!("{name}_{i}.ppm");
            if seen.insert(path.clone()) {
                text.push_str(&format!("{path},{label}\n"));
                used.push((path, *label));
            }
        }
        let m = parse_manifest(&text).unwrap();
        prop_assert_eq!(m.len(), used.len());
        for (e, (path, label)) in m.entries.iter().zip(&used) {
            prop_assert_eq!(&e.path, path);
            prop_assert_eq!(e.label, *label);
        }
        prop_assert_eq!(parse_manifest(&m.to_csv()).unwrap(), m);
    }
}
