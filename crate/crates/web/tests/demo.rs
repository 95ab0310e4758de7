use tryon_web::Demo;

#[test]
fn images_have_rgba_size() {
    let mut d = Demo::new(64, 48).unwrap();
    d.generate(1, 2, 0.9, 10.0, 2.0, -1.0, 0.0, true).unwrap();
    let n = 64 * 48 * 4;
    for img in [d.garment_rgba(), d.target_rgba(), d.person_rgba(), d.agnostic_rgba(), d.flow_rgba()] {
        let img = img.unwrap();
        assert_eq!(img.len(), n);
        assert!(img.chunks(4).all(|p| p[3] == 255));
    }
    assert!(d.caption().contains("checkered"));
}

#[test]
fn matching_the_true_translation_scores_best() {
    let mut d = Demo::new(64, 48).unwrap();
    d.generate(0, 0, 1.0, 0.0, 3.0, 2.0, 0.0, false).unwrap();
    d.warp_manual(3.0, 2.0, 1.0).unwrap();
    let exact = d.score_manual().unwrap();
    d.warp_manual(0.0, 0.0, 1.0).unwrap();
    let identity = d.score_manual().unwrap();
    assert!(exact > 0.95, "{exact}");
    assert!(exact > identity);
}

#[test]
fn bend_mode_generates() {
    let mut d = Demo::new(64, 48).unwrap();
    d.generate(3, 5, 1.0, 0.0, 0.0, 0.0, 2.0, false).unwrap();
    assert_eq!(d.person_rgba().unwrap().len(), 64 * 48 * 4);
}
