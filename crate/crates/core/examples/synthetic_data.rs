//! Shape images, moving-shape clips and the mixed batch stream; writes a few
//! frames as PPM files.
//!
//! cargo run --release --example synthetic_data -- [out_dir]

use unidual::data::{gen_motion_clip, gen_shape_image, write_frame, MixedStream, SourceSpec, DIRECTIONS};

fn main() -> unidual::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_frames".into());
    std::fs::create_dir_all(&out).map_err(|e| unidual::Error::io(&out, e))?;
    let image = SourceSpec::image(0, 3, 32, 32);
    let video = SourceSpec::video(1, 3, 32, 32, 8);
    println!("image classes {}, video classes {} (shape × direction)", image.classes(), video.classes());

    let img = gen_shape_image::<f32>(&image, 0, 0);
    write_frame(format!("{out}/image.ppm"), &img.pixels, 0)?;
    let clip = gen_motion_clip::<f32>(&video, 0, 0);
    let (shape, dir) = (clip.label / video.directions, clip.label % video.directions);
    println!("clip 0: shape {shape}, moving {:?} px/frame", DIRECTIONS[dir]);
    for f in [0, 7] {
        write_frame(format!("{out}/clip_frame{f}.ppm"), &clip.pixels, f)?;
    }

    let mut stream = MixedStream::new(vec![image, video], 32, 7)?;
    let batch = stream.next_batch::<f32>();
    for part in &batch.parts {
        println!("source {} ({}): {} examples, pixels {:?}", part.source_id, part.modality, part.labels.len(), part.pixels.shape());
    }
    Ok(())
}
