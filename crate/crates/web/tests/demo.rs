use acmt_core::phantom::generate_phantom;
use acmt_web::{boundary_overlay, bridge_state, registration_view, to_rgba};

#[test]
fn rgba_layout_and_range() {
    let p = generate_phantom(1, (32, 32)).unwrap();
    let rgba = to_rgba(&p.us);
    assert_eq!(rgba.len(), 32 * 32 * 4);
    assert!(rgba.chunks(4).all(|c| c[0] == c[1] && c[1] == c[2] && c[3] == 255));
    let overlay = boundary_overlay(&p);
    let red = overlay.chunks(4).filter(|c| c[..3] == [230, 40, 40]).count();
    assert_eq!(red, p.boundary_mask.count());
}

#[test]
fn bridge_endpoints_are_the_pair() {
    let p = generate_phantom(2, (32, 32)).unwrap();
    assert_eq!(bridge_state(&p, 0.0, 0.5, 0).unwrap(), p.mr);
    assert_eq!(bridge_state(&p, 1.0, 0.5, 0).unwrap(), p.us);
    let a = bridge_state(&p, 0.4, 0.5, 3).unwrap();
    assert_eq!(a, bridge_state(&p, 0.4, 0.5, 3).unwrap());
    assert!(bridge_state(&p, 1.5, 0.5, 0).is_err());
}

#[test]
fn unregistered_chessboard_scores_the_raw_overlap() {
    let p = generate_phantom(3, (32, 32)).unwrap();
    let raw = registration_view(&p, 8, false).unwrap();
    assert_eq!(raw.composite.shape(), (32, 32));
    assert!((0.0..=1.0).contains(&raw.scores.dsc));
    assert!(registration_view(&p, 0, false).is_err());
}
