// Expects the wasm-bindgen output in ./pkg (see the README).
import init, { Demo } from "./pkg/dptrack_wasm.js";

const $ = (id) => document.getElementById(id);
const N_FRAMES = 40;
let demo = null;

function paint(canvas, rgba, side, box) {
  canvas.width = side;
  canvas.height = side;
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), side, side), 0, 0);
  if (box) {
    ctx.strokeStyle = "#0f0";
    ctx.strokeRect(box[0], box[1], box[2], box[3]);
  }
}

function guard(f) {
  try {
    f();
    $("err").textContent = "";
  } catch (e) {
    $("err").textContent = String(e);
  }
}

function rebuild() {
  guard(() => {
    if (demo) demo.free();
    demo = new Demo(Number($("seed").value), Number($("illum").value), Number($("warp").value), N_FRAMES);
    redraw();
  });
}

function redraw() {
  guard(() => {
    const t = Number($("t").value);
    const n = demo.size();
    $("tval").textContent = t;
    paint($("frame"), demo.frame_rgba(t), n, demo.gt_box(t));

    const lap = $("lap").checked;
    const maxLevel = lap ? demo.levels() - 1 : demo.levels();
    $("level").max = maxLevel;
    const level = Math.min(Number($("level").value), maxLevel);
    $("lval").textContent = level;
    paint($("pyr"), demo.pyramid_level(t, level, lap), n >> level);

    const d = demo.deform(t, Number($("dil").value), Number($("sx").value), Number($("sy").value));
    paint($("deform"), d, n);
  });
}

await init();
for (const id of ["seed", "illum", "warp"]) $(id).addEventListener("change", rebuild);
for (const id of ["t", "level", "lap", "dil", "sx", "sy"]) $(id).addEventListener("input", redraw);
rebuild();
