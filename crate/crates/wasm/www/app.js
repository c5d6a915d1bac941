import init, { kernel, preview, families, gate } from "./pkg/demoe_wasm.js";

const $ = (id) => document.getElementById(id);

function paint(canvas, size, rgba) {
  canvas.width = size;
  canvas.height = size;
  const img = new ImageData(new Uint8ClampedArray(rgba), size, size);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function guard(out, f) {
  try {
    out.classList.remove("err");
    f();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e.message ?? e);
  }
}

function drawKernel() {
  guard($("k-info"), () => {
    const k = kernel($("k-kind").value, +$("k-a").value, +$("k-b").value, +$("k-seed").value);
    paint($("k-canvas"), k.size, k.rgba());
    const sum = k.data.reduce((s, v) => s + v, 0);
    $("k-info").textContent = `${k.size}×${k.size}, sum ${sum.toFixed(6)}`;
    k.free();
  });
}

function drawPreview() {
  guard($("p-info"), () => {
    const p = preview($("p-family").value, +$("p-size").value, +$("p-seed").value);
    paint($("p-clean"), p.size, p.clean_rgba());
    paint($("p-degraded"), p.size, p.degraded_rgba());
    $("p-info").textContent = `PSNR ${p.psnr.toFixed(2)} dB, SSIM ${p.ssim.toFixed(4)}`;
    $("p-spec").textContent = JSON.stringify(JSON.parse(p.spec), null, 2);
    p.free();
  });
}

function drawGate() {
  guard($("g-info"), () => {
    const logits = new Float64Array($("g-logits").value.split(",").map(Number));
    const g = gate(logits, +$("g-k").value, +$("g-expert").value);
    const bars = $("g-bars");
    bars.replaceChildren(...Array.from(g, (w, i) => {
      const d = document.createElement("div");
      d.className = "bar";
      d.style.height = `${Math.max(2, w * 110)}px`;
      d.textContent = `${i}: ${w.toFixed(2)}`;
      return d;
    }));
    $("g-info").textContent = `active experts: ${Array.from(g).flatMap((w, i) => (w > 0 ? [i] : [])).join(", ")}`;
  });
}

await init();
for (const f of families()) $("p-family").add(new Option(f));
for (const id of ["k-kind", "k-a", "k-b", "k-seed"]) $(id).addEventListener("input", drawKernel);
for (const id of ["p-family", "p-size", "p-seed"]) $(id).addEventListener("input", drawPreview);
for (const id of ["g-logits", "g-k", "g-expert"]) $(id).addEventListener("input", drawGate);
drawKernel();
drawPreview();
drawGate();
