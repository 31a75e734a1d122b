use candle_core::{DType, Device};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hdc_core::bitstream::{apply_mask, make_mask, pack_stream, unpack_stream, IndexMap, MaskSchedule, StreamHeader};
use hdc_core::corpus::synthetic_image;
use hdc_core::nn::{conv2d, randn, ParamStore};
use hdc_core::vq_stream::{quantize, Codebook, VqLatent};
use hdc_core::{decode_image, encode_image, CodecConfig, HdcModel};

fn bitstream(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let header = StreamHeader::new(256, 256, 16, 1024).unwrap();
    let ids: Vec<u32> = (0..256).map(|_| rng.random_range(0..1024)).collect();
    let map = IndexMap::new(16, 16, ids).unwrap();
    let payload: Vec<u8> = (0..207).map(|_| rng.random()).collect();
    for schedule in [MaskSchedule::NoMask, MaskSchedule::Keep1Of4] {
        let masked = apply_mask(&map, &make_mask(schedule, 16, 16)).unwrap();
        let bytes = pack_stream(&masked, &payload, &header).unwrap();
        c.bench_function(&format!("pack/{schedule}"), |b| {
            b.iter(|| pack_stream(black_box(&masked), &payload, &header).unwrap())
        });
        c.bench_function(&format!("unpack/{schedule}"), |b| b.iter(|| unpack_stream(black_box(&bytes)).unwrap()));
    }
}

fn quantization(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (k, dim) = (1024, 64);
    let cw: Vec<f32> = (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut store = ParamStore::new(0, DType::F32, &Device::Cpu);
    let codebook = Codebook::from_codewords(&mut store, k, dim, &cw).unwrap();
    let latent = VqLatent {
        grid_h: 16,
        grid_w: 16,
        dim,
        data: (0..256 * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    c.bench_function("quantize/16x16xK1024", |b| b.iter(|| quantize(black_box(&latent), &codebook).unwrap()));
}

fn convolution(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dev = Device::Cpu;
    let x = randn(&mut rng, &[8, 16, 32, 32], DType::F32, &dev).unwrap();
    let w = randn(&mut rng, &[24, 16, 3, 3], DType::F32, &dev).unwrap();
    c.bench_function("conv2d/im2col/3x3", |b| b.iter(|| conv2d(black_box(&x), &w, 1, 1).unwrap()));
    c.bench_function("conv2d/native/3x3", |b| b.iter(|| x.conv2d(black_box(&w), 1, 1, 1, 1).unwrap()));
}

fn codec(c: &mut Criterion) {
    let model = HdcModel::new(&CodecConfig::toy()).unwrap();
    let x = synthetic_image(64, 3);
    let bs = encode_image(&x, &model, MaskSchedule::Keep1Of4).unwrap();
    let mut g = c.benchmark_group("toy_codec");
    g.sample_size(20);
    g.bench_function("encode", |b| b.iter(|| encode_image(black_box(&x), &model, MaskSchedule::Keep1Of4).unwrap()));
    g.bench_function("decode", |b| {
        b.iter_batched(|| bs.clone(), |bs| decode_image(&bs, &model, 0).unwrap(), BatchSize::SmallInput)
    });
    g.finish();
}

criterion_group!(benches, bitstream, quantization, convolution, codec);
criterion_main!(benches);
