//! C ABI over the `mmdn` library.
//!
//! Every fallible call returns an [`MmdnStatus`]; on failure the message is
//! available from [`mmdn_last_error`] on the same thread. Networks are opaque
//! handles released with [`mmdn_network_free`]. Landmark sets cross the
//! boundary as interleaved `x0, y0, x1, y1, ...` arrays of doubles; heatmaps
//! and images are row-major (images `height × width × 3`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mmdn::backend::Eager;
use mmdn::config::RunConfig;
use mmdn::covariance::newton_schulz_sqrt;
use mmdn::data::BBox;
use mmdn::heatmap::{decode_argmax, encode_landmark_heatmap, Heatmap, HeatmapKind};
use mmdn::landmarks::LandmarkSet;
use mmdn::loss::{js_divergence, normalize_to_distribution};
use mmdn::metrics::{nme, Normalization};
use mmdn::network::{checkpoint, NetworkState};
use mmdn::search::{decode_with_search, SearchConfig};
use mmdn::{Error, Tensor};

/// Result of every fallible call. Values match the CLI exit codes where the
/// classes overlap.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmdnStatus {
    Ok = 0,
    /// Invalid configuration value.
    Config = 2,
    /// File could not be read or written.
    Io = 3,
    /// Input violated a documented precondition, including shape mismatches.
    Contract = 4,
    /// A required pointer was NULL.
    NullPointer = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmdnNormalization {
    InterPupil = 0,
    InterOcular = 1,
    FaceSize = 2,
}

impl From<MmdnNormalization> for Normalization {
    fn from(n: MmdnNormalization) -> Self {
        match n {
            MmdnNormalization::InterPupil => Normalization::InterPupil,
            MmdnNormalization::InterOcular => Normalization::InterOcular,
            MmdnNormalization::FaceSize => Normalization::FaceSize,
        }
    }
}

/// Opaque network handle.
pub struct MmdnNetwork {
    state: NetworkState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Contract(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn call(f: impl FnOnce() -> Result<(), Failure>) -> MmdnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmdnStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is NULL"));
            MmdnStatus::NullPointer
        }
        Ok(Err(Failure::Contract(msg))) => {
            set_error(msg);
            MmdnStatus::Contract
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            match e.exit_code() {
                2 => MmdnStatus::Config,
                3 => MmdnStatus::Io,
                _ => MmdnStatus::Contract,
            }
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MmdnStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(
    p: *mut f64,
    n: usize,
    what: &'static str,
) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn string(p: *const c_char, what: &'static str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::Contract(format!("{what} is not UTF-8")))
}

fn require_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got != want {
        return Err(Failure::Contract(format!(
            "{what} holds {got} values, expected {want}"
        )));
    }
    Ok(())
}

/// Config text or the defaults when `config_toml` is NULL.
unsafe fn run_config(config_toml: *const c_char) -> Result<RunConfig, Failure> {
    if config_toml.is_null() {
        return Ok(RunConfig::default());
    }
    Ok(RunConfig::from_toml(&string(config_toml, "config_toml")?)?)
}

fn points(xy: &[f64]) -> Result<LandmarkSet, Failure> {
    Ok(LandmarkSet::from_points(
        xy.chunks(2).map(|c| [c[0], c[1]]).collect(),
    )?)
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mmdn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmdn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized network. `config_toml` is a run config
/// document (only its `[network]` table is used) or NULL for defaults.
///
/// # Safety
/// `config_toml` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mmdn_network_new(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut MmdnNetwork,
) -> MmdnStatus {
    call(|| {
        let out = out_ref(out, "out")?;
        let cfg = run_config(config_toml)?;
        let state = NetworkState::build(cfg.network, seed)?;
        *out = Box::into_raw(Box::new(MmdnNetwork { state }));
        Ok(())
    })
}

/// Loads a checkpoint written for the network described by `config_toml`.
///
/// # Safety
/// `config_toml` is NULL or NUL-terminated; `path` is NUL-terminated; `out`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn mmdn_network_load(
    config_toml: *const c_char,
    path: *const c_char,
    out: *mut *mut MmdnNetwork,
) -> MmdnStatus {
    call(|| {
        let out = out_ref(out, "out")?;
        let cfg = run_config(config_toml)?;
        let path = PathBuf::from(string(path, "path")?);
        let state = checkpoint::load(&path, &cfg.network)?;
        *out = Box::into_raw(Box::new(MmdnNetwork { state }));
        Ok(())
    })
}

/// # Safety
/// `net` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mmdn_network_save(
    net: *const MmdnNetwork,
    path: *const c_char,
) -> MmdnStatus {
    call(|| {
        let net = net.as_ref().ok_or(Failure::Null("net"))?;
        let path = PathBuf::from(string(path, "path")?);
        Ok(checkpoint::save(&net.state, &path)?)
    })
}

/// Releases a handle; NULL is ignored.
///
/// # Safety
/// `net` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmdn_network_free(net: *mut MmdnNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Side of the square input image in pixels, 0 for NULL.
///
/// # Safety
/// `net` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmdn_network_input_size(net: *const MmdnNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.state.config.input_size)
}

/// # Safety
/// `net` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmdn_network_parameter_count(net: *const MmdnNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.state.parameter_count())
}

/// Height, width and channel count of [`mmdn_network_predict`] output.
///
/// # Safety
/// `net` is a live handle; the three outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn mmdn_network_output_shape(
    net: *const MmdnNetwork,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> MmdnStatus {
    call(|| {
        let net = net.as_ref().ok_or(Failure::Null("net"))?;
        let c = &net.state.config;
        *out_ref(height, "height")? = c.heatmap_size;
        *out_ref(width, "width")? = c.heatmap_size;
        *out_ref(channels, "channels")? = c.output_channels();
        Ok(())
    })
}

/// Runs the network on an `input × input × 3` image with values in `[0, 1]`
/// and writes the `H × W × C` heatmaps to `out`.
///
/// # Safety
/// `image` holds `image_len` readable doubles; `out` holds `out_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mmdn_network_predict(
    net: *const MmdnNetwork,
    image: *const f64,
    image_len: usize,
    out: *mut f64,
    out_len: usize,
) -> MmdnStatus {
    call(|| {
        let net = net.as_ref().ok_or(Failure::Null("net"))?;
        let c = &net.state.config;
        let n = c.input_size;
        require_len(image_len, n * n * 3, "image")?;
        require_len(
            out_len,
            c.heatmap_size * c.heatmap_size * c.output_channels(),
            "out",
        )?;
        let image = Tensor::new(&[n, n, 3], slice(image, image_len, "image")?.to_vec())?;
        let maps = net.state.predict(&image)?;
        slice_mut(out, out_len, "out")?.copy_from_slice(maps.data());
        Ok(())
    })
}

/// Gaussian landmark heatmap centered on `(x, y)`.
///
/// # Safety
/// `out` holds `width * height` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mmdn_encode_landmark(
    x: f64,
    y: f64,
    sigma: f64,
    width: usize,
    height: usize,
    out: *mut f64,
) -> MmdnStatus {
    call(|| {
        let out = slice_mut(out, width * height, "out")?;
        let h = encode_landmark_heatmap([x, y], sigma, width, height)?;
        out.copy_from_slice(&h.values);
        Ok(())
    })
}

/// Pixel of the maximum value, first in row-major order on ties.
///
/// # Safety
/// `values` holds `width * height` readable doubles; `x` and `y` are writable.
#[no_mangle]
pub unsafe extern "C" fn mmdn_decode_argmax(
    values: *const f64,
    width: usize,
    height: usize,
    x: *mut usize,
    y: *mut usize,
) -> MmdnStatus {
    call(|| {
        let h = Heatmap::new(
            width,
            height,
            slice(values, width * height, "values")?.to_vec(),
            HeatmapKind::Landmark,
        )?;
        let (px, py) = decode_argmax(&h)?;
        *out_ref(x, "x")? = px;
        *out_ref(y, "y")? = py;
        Ok(())
    })
}

/// Argmax of `landmark` refined by the windowed search against `boundary`.
/// Writes both the argmax and the searched pixel.
///
/// # Safety
/// `landmark` and `boundary` each hold `width * height` readable doubles;
/// `argmax_xy` and `search_xy` each hold 2 writable values.
#[no_mangle]
pub unsafe extern "C" fn mmdn_search(
    landmark: *const f64,
    boundary: *const f64,
    width: usize,
    height: usize,
    window: usize,
    sigma3: f64,
    argmax_xy: *mut usize,
    search_xy: *mut usize,
) -> MmdnStatus {
    call(|| {
        let n = width * height;
        let h = Heatmap::new(
            width,
            height,
            slice(landmark, n, "landmark")?.to_vec(),
            HeatmapKind::Landmark,
        )?;
        let b = Heatmap::new(
            width,
            height,
            slice(boundary, n, "boundary")?.to_vec(),
            HeatmapKind::Boundary,
        )?;
        let cfg = SearchConfig {
            window,
            sigma3,
            ..SearchConfig::default()
        };
        let (a, s) = decode_with_search(&h, &b, &cfg)?;
        if argmax_xy.is_null() {
            return Err(Failure::Null("argmax_xy"));
        }
        if search_xy.is_null() {
            return Err(Failure::Null("search_xy"));
        }
        std::slice::from_raw_parts_mut(argmax_xy, 2).copy_from_slice(&[a.0, a.1]);
        std::slice::from_raw_parts_mut(search_xy, 2).copy_from_slice(&[s.0, s.1]);
        Ok(())
    })
}

/// Normalized mean error of `n_points` predicted points. `bbox` is
/// `x, y, w, h` and is required for [`MmdnNormalization::FaceSize`], NULL
/// otherwise allowed.
///
/// # Safety
/// `pred` and `gt` hold `2 * n_points` readable doubles; `bbox` is NULL or
/// holds 4; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mmdn_nme(
    pred: *const f64,
    gt: *const f64,
    n_points: usize,
    normalization: MmdnNormalization,
    bbox: *const f64,
    out: *mut f64,
) -> MmdnStatus {
    call(|| {
        let pred = points(slice(pred, 2 * n_points, "pred")?)?;
        let gt = points(slice(gt, 2 * n_points, "gt")?)?;
        let bbox = if bbox.is_null() {
            None
        } else {
            let b = std::slice::from_raw_parts(bbox, 4);
            Some(BBox::new(b[0], b[1], b[2], b[3])?)
        };
        *out_ref(out, "out")? = nme(&pred, &gt, normalization.into(), bbox.as_ref())?;
        Ok(())
    })
}

/// Square root of a `d × d` symmetric positive definite matrix by `k`
/// Newton–Schulz iterations. Sets `degenerate` when the trace was too small
/// to normalize.
///
/// # Safety
/// `sigma` holds `d * d` readable doubles, `out` holds `d * d` writable
/// doubles, `degenerate` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn mmdn_sqrtm(
    sigma: *const f64,
    d: usize,
    k: usize,
    out: *mut f64,
    degenerate: *mut bool,
) -> MmdnStatus {
    call(|| {
        let sigma = Tensor::new(&[d, d], slice(sigma, d * d, "sigma")?.to_vec())?;
        let root = newton_schulz_sqrt(&Eager, &sigma, k)?;
        slice_mut(out, d * d, "out")?.copy_from_slice(root.y_hat.data());
        if let Some(flag) = degenerate.as_mut() {
            *flag = root.degenerate;
        }
        Ok(())
    })
}

/// Jensen–Shannon divergence between two nonnegative maps of `n` values,
/// each normalized to sum to one first.
///
/// # Safety
/// `p` and `q` hold `n` readable doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mmdn_js_divergence(
    p: *const f64,
    q: *const f64,
    n: usize,
    out: *mut f64,
) -> MmdnStatus {
    call(|| {
        let dist = |v: &[f64]| -> Result<_, Failure> {
            Ok(normalize_to_distribution(&Heatmap::new(
                n,
                1,
                v.to_vec(),
                HeatmapKind::Landmark,
            )?))
        };
        let (p, q) = (dist(slice(p, n, "p")?)?, dist(slice(q, n, "q")?)?);
        *out_ref(out, "out")? = js_divergence(&p, &q)?;
        Ok(())
    })
}
