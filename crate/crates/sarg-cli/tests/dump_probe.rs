//! Manual inspection helper: renders a grid of raw samples next to their
//! codebook round-trips. Ignored by default; writes /tmp/sarg-dump.png.

use sarg::pipeline::{build_tokenizer, RunConfig};
use sarg::procgen::{make_raw, Image, IMG_SIZE};
use sarg::rng::subseed;

#[test]
#[ignore]
fn dump_quantized_raws() {
    let mut cfg = RunConfig::from_json(include_str!("../../../presets/tiny.json")).unwrap();
    let ks = [96usize, 256, 512];
    let toks: Vec<_> = ks
        .iter()
        .map(|&k| {
            cfg.tokenizer.codebook_size = k;
            cfg.tokenizer.corpus_images = 800;
            build_tokenizer(&cfg).unwrap()
        })
        .collect();
    let n = 8;
    let pad = 2;
    let rows = 1 + ks.len();
    let w = n * (IMG_SIZE + pad) + pad;
    let h = rows * (IMG_SIZE + pad) + pad;
    let mut sheet = Image::new(h, w);
    for v in sheet.data.iter_mut() {
        *v = 1.0;
    }
    let mut prompts = Vec::new();
    for i in 0..n {
        let s = make_raw(subseed(177, &format!("jc2-{i}")));
        prompts.push(s.prompt.clone());
        let mut row_imgs = vec![s.image.clone()];
        for tok in &toks {
            let grid = tok.codebook.encode_image(&s.image).unwrap();
            row_imgs.push(tok.codebook.decode_image(&grid).unwrap());
        }
        for (row, img) in row_imgs.iter().enumerate() {
            let oy = pad + row * (IMG_SIZE + pad);
            let ox = pad + i * (IMG_SIZE + pad);
            for y in 0..IMG_SIZE {
                for x in 0..IMG_SIZE {
                    sheet.set_pixel(oy + y, ox + x, img.pixel(y, x));
                }
            }
        }
    }
    println!("prompts: {prompts:?}");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = sheet.pixel(y, x);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (p[0].clamp(0.0, 1.0) * 255.0) as u8,
                    (p[1].clamp(0.0, 1.0) * 255.0) as u8,
                    (p[2].clamp(0.0, 1.0) * 255.0) as u8,
                ]),
            );
        }
    }
    buf.save("/tmp/sarg-dump.png").unwrap();
}
