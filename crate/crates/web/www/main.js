import init, { dirichlet, hallucinate, simulate } from "./pkg/fedhal_web.js";

const COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
const $ = (id) => document.getElementById(id);

function call(fn, ...args) {
  const out = JSON.parse(fn(...args));
  if (out.error) throw new Error(out.error);
  return out;
}

function fail(canvas, err) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.fillStyle = "#b00";
  ctx.fillText(err.message, 10, 20);
}

function legend(el, entries) {
  el.innerHTML = entries
    .map(([name, color]) => `<span><i style="background:${color}"></i>${name}</span>`)
    .join("");
}

// Barycentric plot on a triangle for 3 components, bars otherwise.
function drawDirichlet() {
  const canvas = $("d-canvas");
  const ctx = canvas.getContext("2d");
  let res;
  try {
    res = call(dirichlet, $("d-alpha").value, Number($("d-count").value), BigInt($("d-seed").value));
  } catch (e) {
    return fail(canvas, e);
  }
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const k = res.alpha.length;
  if (k === 3) {
    const v = [[210, 20], [20, 350], [400, 350]];
    ctx.strokeStyle = "#888";
    ctx.beginPath();
    ctx.moveTo(...v[0]);
    ctx.lineTo(...v[1]);
    ctx.lineTo(...v[2]);
    ctx.closePath();
    ctx.stroke();
    ctx.fillStyle = "rgba(31,119,180,0.35)";
    for (const w of res.samples) {
      const x = w[0] * v[0][0] + w[1] * v[1][0] + w[2] * v[2][0];
      const y = w[0] * v[0][1] + w[1] * v[1][1] + w[2] * v[2][1];
      ctx.fillRect(x - 1.5, y - 1.5, 3, 3);
    }
  } else {
    const bw = canvas.width / k;
    res.mean.forEach((m, i) => {
      ctx.fillStyle = COLORS[i % COLORS.length];
      ctx.fillRect(i * bw + 8, canvas.height - m * (canvas.height - 20), bw - 16, m * (canvas.height - 20));
    });
  }
  $("d-info").textContent = "mean weights: " + res.mean.map((m) => m.toFixed(3)).join(", ");
}

function bounds(clouds) {
  const pts = clouds.flatMap((c) => c.points);
  const xs = pts.map((p) => p[0]);
  const ys = pts.map((p) => p[1]);
  return [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
}

function drawHallucination() {
  const canvas = $("h-canvas");
  const ctx = canvas.getContext("2d");
  let res;
  try {
    res = call(hallucinate, $("h-alpha").value, 150, BigInt($("h-seed").value));
  } catch (e) {
    return fail(canvas, e);
  }
  const clouds = [...res.domains, res.restyled];
  const [x0, x1, y0, y1] = bounds(clouds);
  const sx = (x) => 20 + ((x - x0) / (x1 - x0)) * (canvas.width - 40);
  const sy = (y) => canvas.height - 20 - ((y - y0) / (y1 - y0)) * (canvas.height - 40);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  clouds.forEach((c, i) => {
    const color = i < 3 ? COLORS[i] : COLORS[3];
    ctx.fillStyle = color;
    ctx.globalAlpha = i < 3 ? 0.35 : 0.8;
    for (const [x, y] of c.points) ctx.fillRect(sx(x) - 2, sy(y) - 2, 4, 4);
  });
  ctx.globalAlpha = 1;
  ctx.strokeStyle = "#000";
  ctx.beginPath();
  ctx.arc(sx(res.novel.mu[0]), sy(res.novel.mu[1]), 6, 0, 2 * Math.PI);
  ctx.stroke();
  const w = res.weights.map((x) => x.toFixed(2)).join(" / ");
  legend($("h-legend"), [
    ["client 0", COLORS[0]],
    ["client 1", COLORS[1]],
    ["client 2", COLORS[2]],
    [`client 0 restyled (weights ${w})`, COLORS[3]],
  ]);
}

function drawSimulation() {
  const canvas = $("s-canvas");
  const ctx = canvas.getContext("2d");
  const variants = [...document.querySelectorAll(".s-var:checked")].map((c) => c.value).join(",");
  let res;
  try {
    res = call(simulate, variants, Number($("s-epochs").value), Number($("s-lambda").value), BigInt($("s-seed").value));
  } catch (e) {
    return fail(canvas, e);
  }
  const all = res.curves.flatMap((c) => c.map);
  const lo = Math.floor(Math.min(...all) / 5) * 5;
  const hi = Math.ceil(Math.max(...all) / 5) * 5;
  const last = res.epochs.length - 1;
  const sx = (e) => 40 + (e / Math.max(last, 1)) * (canvas.width - 60);
  const sy = (m) => canvas.height - 30 - ((m - lo) / Math.max(hi - lo, 1)) * (canvas.height - 50);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.fillStyle = "#555";
  ctx.fillText(`${hi}`, 5, sy(hi) + 4);
  ctx.fillText(`${lo}`, 5, sy(lo) + 4);
  ctx.fillText("epoch", canvas.width - 50, canvas.height - 8);
  ctx.fillText("target mAP (%)", 40, 12);
  res.curves.forEach((c, i) => {
    ctx.strokeStyle = COLORS[i % COLORS.length];
    ctx.lineWidth = 2;
    ctx.beginPath();
    c.map.forEach((m, e) => (e ? ctx.lineTo(sx(e), sy(m)) : ctx.moveTo(sx(e), sy(m))));
    ctx.stroke();
  });
  legend(
    $("s-legend"),
    res.curves.map((c, i) => [`${c.variant}: ${c.map[last].toFixed(1)} mAP, ${c.rank1[last].toFixed(1)} rank-1`, COLORS[i % COLORS.length]]),
  );
}

await init();
$("d-run").onclick = drawDirichlet;
$("h-run").onclick = drawHallucination;
$("s-run").onclick = () => {
  $("s-run").disabled = true;
  setTimeout(() => {
    drawSimulation();
    $("s-run").disabled = false;
  });
};
drawDirichlet();
drawHallucination();
