#![no_main]
use libfuzzer_sys::fuzz_target;

use deocc_core::datagen::{ingest_external, ExternalHuman};

// Layout: width, height, flags, then RGB pixels, mask bytes and (if flag
// bit 0 is set) label bytes.
fuzz_target!(|data: &[u8]| {
    let [w, h, flags, rest @ ..] = data else { return };
    let (w, h) = (*w as u32 % 48 + 1, *h as u32 % 48 + 1);
    let n = (w * h) as usize;
    let with_parsing = flags & 1 == 1;
    let need = n * 3 + n + if with_parsing { n } else { 0 };
    if rest.len() < need {
        return;
    }
    let image = image::RgbImage::from_raw(w, h, rest[..3 * n].to_vec()).unwrap();
    let mask = image::GrayImage::from_raw(w, h, rest[3 * n..4 * n].to_vec()).unwrap();
    let parsing = with_parsing.then(|| image::GrayImage::from_raw(w, h, rest[4 * n..5 * n].to_vec()).unwrap());
    let ext = ExternalHuman { image, mask, parsing };
    let _ = ingest_external(&ext, (64, 64), 7);
});
