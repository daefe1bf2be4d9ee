use orthoconv::io::{self, decode_npy, encode_npy, format_float, parse_config, write_csv_to, Cell, NpyDtype};
use orthoconv::trainer::{RegMode, TrainConfig};
use orthoconv::{Error, Rng, Tensor};
use proptest::prelude::*;

fn random_tensor(rng: &mut Rng) -> Tensor {
    let ndim = 1 + rng.below(4);
    let shape: Vec<usize> = (0..ndim).map(|_| 1 + rng.below(5)).collect();
    let scale = 10f64.powi(rng.below(13) as i32 - 6);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal() * scale).collect();
    Tensor::from_vec(&shape, data).unwrap()
}

#[test]
fn npy_round_trips_100_random_tensors() {
    let mut rng = Rng::new(2024);
    let dir = tempfile::tempdir().unwrap();
    for n in 0..100 {
        let t = random_tensor(&mut rng);
        let f8 = decode_npy(&encode_npy(&t, NpyDtype::F8)).unwrap();
        assert_eq!(f8.shape(), t.shape());
        assert!(f8.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let f4 = decode_npy(&encode_npy(&t, NpyDtype::F4)).unwrap();
        assert!(f4.data().iter().zip(t.data()).all(|(a, b)| *a == (*b as f32) as f64));

        let path = dir.path().join(format!("t{n}.npy"));
        io::write_npy(&path, &t, NpyDtype::F8).unwrap();
        assert_eq!(io::read_npy(&path).unwrap().data(), t.data());
    }
}

#[test]
fn npy_headers_are_64_byte_aligned() {
    let t = Tensor::zeros(&[2, 3, 4]).unwrap();
    for dtype in [NpyDtype::F4, NpyDtype::F8] {
        let bytes = encode_npy(&t, dtype);
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes[9 + header_len], b'\n');
    }
}

#[test]
fn corrupted_npy_is_rejected_without_panicking() {
    let mut rng = Rng::new(77);
    let good = encode_npy(&Tensor::randn(&[3, 4], &mut Rng::new(1)).unwrap(), NpyDtype::F8);
    for _ in 0..500 {
        let mut bytes = good.clone();
        match rng.below(3) {
            0 => bytes.truncate(rng.below(bytes.len())),
            1 => {
                let i = rng.below(bytes.len());
                bytes[i] = rng.next_u64() as u8;
            }
            _ => bytes.extend_from_slice(&[0u8; 8]),
        }
        // any outcome but a panic is fine; format failures must be typed
        if let Err(e) = decode_npy(&bytes) {
            assert!(matches!(e, Error::Format { .. } | Error::Shape(_)), "{e}");
        }
    }
}

#[test]
fn npy_errors_name_the_field() {
    let good = encode_npy(&Tensor::zeros(&[2, 2]).unwrap(), NpyDtype::F8);
    let mut bad_magic = good.clone();
    bad_magic[1] = b'X';
    assert!(matches!(decode_npy(&bad_magic), Err(Error::Format { field, .. }) if field == "magic"));
    let mut bad_descr = good.clone();
    let at = good.windows(3).position(|w| w == b"<f8").unwrap();
    bad_descr[at + 1] = b'i';
    assert!(matches!(decode_npy(&bad_descr), Err(Error::Format { field, .. }) if field == "descr"));
    assert!(matches!(decode_npy(&good[..good.len() - 3]), Err(Error::Format { field, .. }) if field == "data"));
}

#[test]
fn csv_is_stable_and_lossless() {
    let rows = vec![
        vec![Cell::from(0usize), Cell::from(0.1), Cell::from("a")],
        vec![Cell::from(1usize), Cell::from(-1e-300), Cell::from("b")],
    ];
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_csv_to(&mut a, &["i", "x", "s"], &rows).unwrap();
    write_csv_to(&mut b, &["i", "x", "s"], &rows).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next(), Some("i,x,s"));
    assert!(!text.contains('\r'));
    assert!(write_csv_to(Vec::new(), &["i"], &rows).is_err());
}

#[test]
fn config_round_trip_and_errors() {
    let cfg = TrainConfig {
        lambda: 0.5,
        seed: 3,
        mode: RegMode::Kernel,
        ..TrainConfig::default()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(parse_config(&text).unwrap(), cfg);
    assert_eq!(parse_config("{}").unwrap(), TrainConfig::default());
    let err = parse_config(r#"{"lr": "fast"}"#).unwrap_err().to_string();
    assert!(err.contains("lr"), "{err}");
    assert!(parse_config(r#"{"learning_rate": 0.1}"#).is_err());
    assert!(parse_config("[1, 2]").is_err());
}

proptest! {
    #[test]
    fn float_format_round_trips(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        let back: f64 = format_float(v).parse().unwrap();
        prop_assert_eq!(back.to_bits(), v.to_bits());
    }
}
