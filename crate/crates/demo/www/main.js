import init, { phantom_frame, undersampled_view, line_histogram, lines_kept } from "./pkg/kseg_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function blit(canvas, pixels) {
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(pixels), canvas.width, canvas.height), 0, 0);
}

function guarded(fn) {
  return () => {
    try {
      fn();
      $("error").textContent = "";
    } catch (e) {
      $("error").textContent = String(e);
    }
  };
}

const drawPhantom = guarded(() => {
  blit($("phantom"), phantom_frame(num("seed"), num("frame"), num("contraction"), num("opacity")));
});

const drawUndersampled = guarded(() => {
  const r = num("accel");
  $("accel-out").textContent = `${r}x, ${lines_kept(r)} lines`;
  blit($("undersampled"), undersampled_view(num("seed"), num("frame"), r, num("b0")));
});

const drawHistogram = guarded(() => {
  const counts = line_histogram(num("accel"), num("sigma"), num("draws"), num("seed"));
  const canvas = $("histogram");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const peak = Math.max(...counts, 1);
  const bar = canvas.width / counts.length;
  counts.forEach((c, i) => {
    const h = (c / peak) * (canvas.height - 4);
    ctx.fillStyle = i === counts.length / 2 ? "#c00" : "#357";
    ctx.fillRect(i * bar, canvas.height - h, bar - 1, h);
  });
});

await init();
for (const id of ["seed", "frame", "contraction", "opacity"]) $(id).addEventListener("input", drawPhantom);
for (const id of ["seed", "frame", "accel", "b0"]) $(id).addEventListener("input", drawUndersampled);
for (const id of ["accel", "sigma", "draws", "seed"]) $(id).addEventListener("input", drawHistogram);
drawPhantom();
drawUndersampled();
drawHistogram();
