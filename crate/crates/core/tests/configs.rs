use std::path::PathBuf;

use tincy::netcfg::{count_ops, load_config, offload_hidden, tincy_yolo, tiny_yolo, LayerDesc};

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn shipped_configs_match_builtin_topologies() {
    assert_eq!(load_config(shipped("tiny-yolo.cfg")).unwrap(), tiny_yolo());
    assert_eq!(load_config(shipped("tincy-yolo.cfg")).unwrap(), tincy_yolo());
    let want = offload_hidden(&tincy_yolo(), "fabric.so", "tincy-yolo-offload.json", "binparam-tincy-yolo/").unwrap();
    assert_eq!(load_config(shipped("tincy-yolo-offload.cfg")).unwrap(), want);
}

#[test]
fn offload_config_counts_like_flat_config() {
    let flat = count_ops(&load_config(shipped("tincy-yolo.cfg")).unwrap()).unwrap();
    let off = load_config(shipped("tincy-yolo-offload.cfg")).unwrap();
    let LayerDesc::Offload(desc) = &off.layers[1] else {
        panic!("layer 2 should be the offload layer");
    };
    assert_eq!(desc.sub.as_ref().unwrap().layers.len(), 12);
    assert_eq!(desc.out_dims(), (512, 13, 13));
    assert_eq!(count_ops(&off).unwrap().total, flat.total);
}
