fn main() {
    let config = sphdepth_core::model::ModelConfig {
        level_nsides: vec![1, 2, 4],
        channels: vec![8, 8, 6],
        encoder_channels: vec![6, 5, 4],
        variant: sphdepth_core::model::Variant::Fusion,
        gsa_offset: 2,
        ffn_expansion: 2,
        heads: 2,
        positional: sphdepth_core::model::PositionalKind::Spe,
        spe_coords: sphdepth_core::model::CoordSet::Xyz,
        allow_nonstandard_aspect: false,
    };
    match sphdepth_core::model::ModelContext::prepare(&config, 32, 16, None) {
        Ok(_) => println!("ok"),
        Err(e) => println!("err: {e}"),
    }
}
