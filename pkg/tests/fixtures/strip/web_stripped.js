
const BASE = "https://example.test";



function register(name) {
    const url = `${BASE}/register`;
    const note = "http://inline // not a comment";
     return fetch(url, { body: name, note });
}
