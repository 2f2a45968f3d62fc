import init, {
  route_point, routing_map, render_scene, render_labels, band_means, balance_run,
} from "./pkg/spectralmoe_web.js";

const COLORS = ["#e69f00", "#56b4e9", "#009e73", "#f0e442", "#0072b2", "#d55e00"];
const $ = (id) => document.getElementById(id);

function blit(canvas, rgba, w, h) {
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
}

// Routing explorer: prototypes live in [-1, 1]^2.
const protos = [-0.5, 0.4, 0.5, 0.5, 0.0, -0.6, 0.6, -0.3];
const MAP = 120;
let dragging = -1;

function toWorld(canvas, ev) {
  const r = canvas.getBoundingClientRect();
  return [((ev.clientX - r.left) / r.width) * 2 - 1, 1 - ((ev.clientY - r.top) / r.height) * 2];
}

function drawRouting() {
  const canvas = $("route-canvas");
  const k = Number($("route-k").value);
  const p = Number($("route-p").value);
  $("route-k-out").textContent = k;
  const img = routing_map(Float64Array.from(protos), k, p, MAP);
  const off = new OffscreenCanvas(MAP, MAP);
  blit(off, img, MAP, MAP);
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  for (let e = 0; e < protos.length / 2; e++) {
    const x = ((protos[2 * e] + 1) / 2) * canvas.width;
    const y = ((1 - protos[2 * e + 1]) / 2) * canvas.height;
    ctx.beginPath();
    ctx.arc(x, y, 8, 0, 2 * Math.PI);
    ctx.fillStyle = COLORS[e];
    ctx.fill();
    ctx.strokeStyle = "#000";
    ctx.stroke();
  }
}

function setupRouting() {
  const canvas = $("route-canvas");
  canvas.addEventListener("pointerdown", (ev) => {
    const [x, y] = toWorld(canvas, ev);
    let best = -1, bestD = 0.08;
    for (let e = 0; e < protos.length / 2; e++) {
      const d = Math.hypot(protos[2 * e] - x, protos[2 * e + 1] - y);
      if (d < bestD) { best = e; bestD = d; }
    }
    dragging = best;
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointerup", () => { dragging = -1; });
  canvas.addEventListener("pointermove", (ev) => {
    const [x, y] = toWorld(canvas, ev);
    if (dragging >= 0) {
      protos[2 * dragging] = Math.max(-1, Math.min(1, x));
      protos[2 * dragging + 1] = Math.max(-1, Math.min(1, y));
      drawRouting();
    }
    const gates = route_point(x, y, Float64Array.from(protos), Number($("route-k").value), Number($("route-p").value));
    $("route-readout").textContent =
      `token (${x.toFixed(2)}, ${y.toFixed(2)})\n` +
      Array.from(gates, (g, e) => `expert ${e}: ${g.toFixed(4)}`).join("\n");
  });
  $("route-k").addEventListener("input", drawRouting);
  $("route-p").addEventListener("change", drawRouting);
  drawRouting();
}

// Scene and shift.
const SIZE = 64, CLASSES = 5, BANDS = 8;

function drawScene() {
  const seed = Number($("scene-seed").value) >>> 0;
  const shift = Number($("scene-shift").value);
  $("scene-shift-out").textContent = shift.toFixed(2);
  blit($("scene-image"), render_scene(seed, SIZE, CLASSES, BANDS, shift), SIZE, SIZE);
  blit($("scene-labels"), render_labels(seed, SIZE, CLASSES, BANDS), SIZE, SIZE);

  const src = band_means(seed, SIZE, CLASSES, BANDS, 0);
  const cur = band_means(seed, SIZE, CLASSES, BANDS, shift);
  const canvas = $("scene-spectrum");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const px = (b) => 30 + (b / (BANDS - 1)) * (canvas.width - 50);
  const py = (v) => canvas.height - 20 - v * (canvas.height - 40);
  ctx.strokeStyle = "#ccc";
  ctx.strokeRect(30, 20, canvas.width - 50, canvas.height - 40);
  for (const [series, color] of [[src, "#888"], [cur, "#0072b2"]]) {
    ctx.beginPath();
    series.forEach((v, b) => (b ? ctx.lineTo(px(b), py(v)) : ctx.moveTo(px(b), py(v))));
    ctx.strokeStyle = color;
    ctx.lineWidth = 2;
    ctx.stroke();
  }
  ctx.fillStyle = "#222";
  ctx.fillText("mean reflectance per band (grey: source)", 30, 12);
}

function setupScene() {
  $("scene-seed").addEventListener("input", drawScene);
  $("scene-shift").addEventListener("input", drawScene);
  drawScene();
}

// Load balancing.
const EXPERTS = 6, STEPS = 500, ROW = 2 + EXPERTS;
let history = null;

function runBalance() {
  const skew = Number($("bal-skew").value);
  $("bal-skew-out").textContent = skew.toFixed(2);
  history = balance_run(1, EXPERTS, 2, skew, STEPS, 0.02);
  drawBalance();
}

function drawBalance() {
  const step = Number($("bal-step").value);
  $("bal-step-out").textContent = step;
  const row = history.subarray(step * ROW, (step + 1) * ROW);
  const imp = row.subarray(2);
  const bars = $("bal-bars").getContext("2d");
  const { width: w, height: h } = bars.canvas;
  bars.clearRect(0, 0, w, h);
  const max = Math.max(...history.filter((_, i) => i % ROW >= 2));
  imp.forEach((v, e) => {
    const bh = (v / max) * (h - 20);
    bars.fillStyle = COLORS[e];
    bars.fillRect(10 + e * ((w - 20) / EXPERTS), h - bh, (w - 20) / EXPERTS - 6, bh);
  });

  const curve = $("bal-curve").getContext("2d");
  curve.clearRect(0, 0, w, h);
  const first = Math.log10(history[0] + 1e-12), floor = -6;
  curve.beginPath();
  for (let s = 0; s <= STEPS; s++) {
    const v = Math.log10(history[s * ROW] + 1e-12);
    const x = (s / STEPS) * w, y = ((first - v) / (first - floor)) * (h - 10) + 5;
    s ? curve.lineTo(x, y) : curve.moveTo(x, y);
  }
  curve.strokeStyle = "#d55e00";
  curve.stroke();
  curve.fillStyle = "#d55e00";
  curve.fillRect((step / STEPS) * w - 1, 0, 2, h);
  curve.fillStyle = "#222";
  curve.fillText("load loss, log scale", 8, 12);

  const ratio = row[1];
  $("bal-readout").textContent =
    `step ${step}: load ${row[0].toExponential(2)}, max/min importance ${Number.isFinite(ratio) ? ratio.toFixed(3) : "inf"}`;
}

function setupBalance() {
  $("bal-skew").addEventListener("change", runBalance);
  $("bal-skew").addEventListener("input", () => { $("bal-skew-out").textContent = Number($("bal-skew").value).toFixed(2); });
  $("bal-step").addEventListener("input", drawBalance);
  runBalance();
}

await init();
setupRouting();
setupScene();
setupBalance();
