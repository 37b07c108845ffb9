use qsilk::npy::{decode, encode, load_tensor};
use qsilk::{Dtype, Error, Shape};

fn handmade(major: u8, descr: &str, fortran: bool, shape: &str, payload: &[u8]) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '{descr}', 'fortran_order': {}, 'shape': {shape}, }}",
        if fortran { "True" } else { "False" }
    );
    let prefix = if major == 1 { 10 } else { 12 };
    let mut header = dict.into_bytes();
    while !(prefix + header.len() + 1).is_multiple_of(64) {
        header.push(b' ');
    }
    header.push(b'\n');
    let mut out = b"\x93NUMPY".to_vec();
    out.extend([major, 0]);
    if major == 1 {
        out.extend((header.len() as u16).to_le_bytes());
    } else {
        out.extend((header.len() as u32).to_le_bytes());
    }
    out.extend(header);
    out.extend_from_slice(payload);
    out
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

#[test]
fn reads_v1_and_v2_headers() {
    let values = [1.5f32, -2.0, 0.25, 8.0, 0.0, -0.5];
    for major in [1, 2] {
        let bytes = handmade(major, "<f4", false, "(1, 1, 2, 3)", &f32_bytes(&values));
        let a = decode(&bytes[..]).unwrap();
        assert_eq!(a.shape, vec![1, 1, 2, 3]);
        assert_eq!(a.data, values);
        assert_eq!(a.dtype, Dtype::F32);
    }
}

#[test]
fn reads_half_precision() {
    // 1.0, -2.0, 0.5 in IEEE binary16
    let payload = [0x00, 0x3c, 0x00, 0xc0, 0x00, 0x38];
    let a = decode(&handmade(1, "<f2", false, "(1, 1, 1, 3)", &payload)[..]).unwrap();
    assert_eq!(a.data, vec![1.0, -2.0, 0.5]);
    assert_eq!(a.dtype, Dtype::F16);
}

#[test]
fn rejects_unsupported_layouts() {
    let four = f32_bytes(&[0.0; 4]);
    for bytes in [
        handmade(1, "<f4", true, "(1, 1, 2, 2)", &four),
        handmade(1, ">f4", false, "(1, 1, 2, 2)", &four),
        handmade(1, "<f8", false, "(1, 1, 1, 2)", &four),
        handmade(1, "<i4", false, "(1, 1, 2, 2)", &four),
    ] {
        assert!(matches!(decode(&bytes[..]), Err(Error::Format(_))));
    }
    assert!(decode(&b"\x93NUMPY\x01\x00"[..]).is_err());
}

#[test]
fn reports_non_finite_position() {
    let bytes = handmade(
        1,
        "<f4",
        false,
        "(1, 2, 1, 2)",
        &f32_bytes(&[0.0, 1.0, 2.0, f32::INFINITY]),
    );
    match decode(&bytes[..]) {
        Err(Error::NonFinite { index, .. }) => assert_eq!(index, vec![0, 1, 0, 1]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn load_requires_rank_four() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r2.npy");
    std::fs::write(
        &path,
        handmade(1, "<f4", false, "(2, 2)", &f32_bytes(&[0.0; 4])),
    )
    .unwrap();
    assert!(matches!(load_tensor(&path), Err(Error::Rank(2))));

    let path = dir.path().join("ok.npy");
    let mut bytes = Vec::new();
    encode(&mut bytes, &[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0], Dtype::F32).unwrap();
    std::fs::write(&path, bytes).unwrap();
    let t = load_tensor(&path).unwrap();
    assert_eq!(t.shape(), Shape::new(2, 1, 1, 2));
    assert!(matches!(
        load_tensor(dir.path().join("missing.npy")),
        Err(Error::Io { .. })
    ));
}
